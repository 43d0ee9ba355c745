//! Grid safety function by recursive sculpting.
//!
//! On a lattice of nodes `q_j` over the region `Q`, the update is
//!
//! `U'(q_i) = max_xi min_j max(|F(q_i, xi) - q_j|, U(q_j))`
//!
//! where `F` is the noisy flow map over a fixed horizon. From `U = 0` the
//! iterates are pointwise non-decreasing and take values in a finite set of
//! distances, so they reach a fixed point exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ByteCursor;
use crate::error::{Error, Result};
use crate::sim::{flow_map, IntegratorConfig, LorenzParams, State3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyRegion {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Default for SafetyRegion {
    fn default() -> Self {
        Self {
            lo: [0.0, -50.0, -50.0],
            hi: [50.0, 50.0, 50.0],
        }
    }
}

impl SafetyRegion {
    pub fn contains(&self, s: State3) -> bool {
        let a = s.to_array();
        (0..3).all(|i| a[i] >= self.lo[i] && a[i] <= self.hi[i])
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|i| self.lo[i] < self.hi[i]) {
            Ok(())
        } else {
            Err(Error::ConfigInvalid {
                field: "safety.region".into(),
                reason: "lo must be below hi on every axis".into(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafetyGrid {
    pub region: SafetyRegion,
    pub res: [usize; 3],
    pub nodes: Vec<State3>,
}

impl SafetyGrid {
    /// Nodes at `lo + k (hi - lo) / (n - 1)`, indexed `(ix ny + iy) nz + iz`.
    pub fn new(region: SafetyRegion, res: [usize; 3]) -> Result<Self> {
        region.validate()?;
        if res.iter().any(|n| *n < 2) {
            return Err(Error::ConfigInvalid {
                field: "safety.res".into(),
                reason: "at least two nodes per axis".into(),
            });
        }
        let mut nodes = Vec::with_capacity(res.iter().product());
        for ix in 0..res[0] {
            for iy in 0..res[1] {
                for iz in 0..res[2] {
                    nodes.push(State3::new(
                        Self::coord(&region, res, 0, ix),
                        Self::coord(&region, res, 1, iy),
                        Self::coord(&region, res, 2, iz),
                    ));
                }
            }
        }
        Ok(Self { region, res, nodes })
    }

    fn coord(region: &SafetyRegion, res: [usize; 3], axis: usize, k: usize) -> f64 {
        let (lo, hi) = (region.lo[axis], region.hi[axis]);
        if k == res[axis] - 1 {
            hi
        } else {
            lo + k as f64 * (hi - lo) / (res[axis] - 1) as f64
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.res[1] + iy) * self.res[2] + iz
    }

    pub fn unindex(&self, i: usize) -> [usize; 3] {
        let iz = i % self.res[2];
        let iy = (i / self.res[2]) % self.res[1];
        [i / (self.res[1] * self.res[2]), iy, iz]
    }

    pub fn spacing(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.region.hi[a] - self.region.lo[a]) / (self.res[a] - 1) as f64)
    }
}

/// Finite set of additive perturbations, always containing zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub bound: State3,
    pub samples: Vec<State3>,
}

impl NoiseModel {
    /// `{0} ∪ {±bound_i e_i}` with duplicates removed.
    pub fn axis_extremes(bound: State3) -> Self {
        let mut samples = vec![State3::ORIGIN];
        let b = bound.to_array();
        for axis in 0..3 {
            for sign in [1.0, -1.0] {
                let mut v = [0.0; 3];
                v[axis] = sign * b[axis].abs();
                let s = State3::from_array(v);
                if !samples.contains(&s) {
                    samples.push(s);
                }
            }
        }
        Self { bound, samples }
    }

    pub fn none() -> Self {
        Self::axis_extremes(State3::ORIGIN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SculptConfig {
    pub tau: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub pruning: bool,
}

impl Default for SculptConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            tol: 1e-6,
            max_iter: 500,
            pruning: true,
        }
    }
}

/// Flow images `F(q_i, xi)` for every node and noise sample, node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Images {
    pub per_node: usize,
    pub points: Vec<State3>,
}

pub fn compute_images(
    grid: &SafetyGrid,
    noise: &NoiseModel,
    tau: f64,
    cfg: &IntegratorConfig,
    p: &LorenzParams,
) -> Result<Images> {
    if !(tau > 0.0) {
        return Err(Error::ConfigInvalid {
            field: "safety.tau".into(),
            reason: "must be positive".into(),
        });
    }
    let mut points = Vec::with_capacity(grid.len() * noise.samples.len());
    for q in &grid.nodes {
        let base = flow_map(*q, tau, State3::ORIGIN, cfg, p)?;
        points.extend(noise.samples.iter().map(|xi| base + *xi));
    }
    Ok(Images {
        per_node: noise.samples.len(),
        points,
    })
}

#[inline]
fn dist(a: State3, b: State3) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Reference update by exhaustive enumeration over `(i, xi, j)`.
pub fn sculpt_naive(u: &[f64], grid: &SafetyGrid, images: &Images) -> Vec<f64> {
    (0..grid.len())
        .map(|i| {
            let mut worst = f64::NEG_INFINITY;
            for f in &images.points[i * images.per_node..(i + 1) * images.per_node] {
                let mut best = f64::INFINITY;
                for (j, q) in grid.nodes.iter().enumerate() {
                    best = best.min(dist(*f, *q).max(u[j]));
                }
                worst = worst.max(best);
            }
            worst
        })
        .collect()
}

const BLOCK: usize = 3;

/// Spatial blocks of nodes for the pruned update.
struct Blocks {
    lo: Vec<[f64; 3]>,
    hi: Vec<[f64; 3]>,
    members: Vec<Vec<usize>>,
}

impl Blocks {
    fn new(grid: &SafetyGrid) -> Self {
        let nb = grid.res.map(|n| n.div_ceil(BLOCK));
        let count = nb[0] * nb[1] * nb[2];
        let mut members = vec![Vec::new(); count];
        for i in 0..grid.len() {
            let [ix, iy, iz] = grid.unindex(i);
            members[((ix / BLOCK) * nb[1] + iy / BLOCK) * nb[2] + iz / BLOCK].push(i);
        }
        let mut lo = vec![[f64::INFINITY; 3]; count];
        let mut hi = vec![[f64::NEG_INFINITY; 3]; count];
        for (b, m) in members.iter().enumerate() {
            for &i in m {
                let a = grid.nodes[i].to_array();
                for ax in 0..3 {
                    lo[b][ax] = lo[b][ax].min(a[ax]);
                    hi[b][ax] = hi[b][ax].max(a[ax]);
                }
            }
        }
        Self { lo, hi, members }
    }

    /// Never exceeds `dist(f, q)` for any member `q`: each clamped axis gap is
    /// at most the true gap and every later operation is monotone.
    fn lower_bound(&self, b: usize, f: State3) -> f64 {
        let a = f.to_array();
        let mut s = 0.0;
        for ax in 0..3 {
            let d = if a[ax] < self.lo[b][ax] {
                self.lo[b][ax] - a[ax]
            } else if a[ax] > self.hi[b][ax] {
                a[ax] - self.hi[b][ax]
            } else {
                0.0
            };
            s += d * d;
        }
        s.sqrt()
    }
}

/// Same result as [`sculpt_naive`], bit for bit. The running minimum is
/// seeded from the node nearest to the image; a block is skipped when its
/// lower bound already reaches the minimum, and within a block nodes are
/// visited in order of `U` so the scan stops at the first `U_j >= best`.
/// `min` is exact and order-independent, so skipping only dominated
/// candidates leaves the result unchanged.
pub fn sculpt_pruned(u: &[f64], grid: &SafetyGrid, images: &Images, threads: usize) -> Vec<f64> {
    let blocks = Blocks::new(grid);
    let sorted: Vec<Vec<usize>> = blocks
        .members
        .iter()
        .map(|m| {
            let mut m = m.clone();
            m.sort_by(|a, b| u[*a].total_cmp(&u[*b]).then(a.cmp(b)));
            m
        })
        .collect();
    let block_min: Vec<f64> = sorted.iter().map(|m| u[m[0]]).collect();
    let h = grid.spacing();
    let nearest = |f: State3| -> usize {
        let a = f.to_array();
        let k = [0, 1, 2].map(|ax| {
            let x = ((a[ax] - grid.region.lo[ax]) / h[ax]).round();
            x.clamp(0.0, (grid.res[ax] - 1) as f64) as usize
        });
        grid.index(k[0], k[1], k[2])
    };
    let node_value = |i: usize| -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for f in &images.points[i * images.per_node..(i + 1) * images.per_node] {
            let j0 = nearest(*f);
            let mut best = dist(*f, grid.nodes[j0]).max(u[j0]);
            for (b, members) in sorted.iter().enumerate() {
                if block_min[b] >= best || blocks.lower_bound(b, *f) >= best {
                    continue;
                }
                for &j in members {
                    if u[j] >= best {
                        break;
                    }
                    best = best.min(dist(*f, grid.nodes[j]).max(u[j]));
                }
            }
            worst = worst.max(best);
        }
        worst
    };
    let n = grid.len();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(node_value).collect();
    }
    let mut out = vec![0.0; n];
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        for (c, slot) in out.chunks_mut(chunk).enumerate() {
            let node_value = &node_value;
            s.spawn(move || {
                for (k, v) in slot.iter_mut().enumerate() {
                    *v = node_value(c * chunk + k);
                }
            });
        }
    });
    out
}

/// Converged (or last) field with its iteration log.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyField {
    pub grid: SafetyGrid,
    pub u: Vec<f64>,
    /// Sup-norm change of every iteration.
    pub deltas: Vec<f64>,
    pub converged: bool,
}

/// Iterates the update from `u0` until the sup-norm change drops below
/// `cfg.tol` or `cfg.max_iter` is reached.
pub fn compute_safety_from(
    grid: &SafetyGrid,
    images: &Images,
    u0: Vec<f64>,
    cfg: &SculptConfig,
    threads: usize,
) -> Result<SafetyField> {
    if u0.len() != grid.len() {
        return Err(Error::shape("compute_safety", &[u0.len()], &[grid.len()]));
    }
    let mut u = u0;
    let mut deltas = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let next = if cfg.pruning {
            sculpt_pruned(&u, grid, images, threads)
        } else {
            sculpt_naive(&u, grid, images)
        };
        let delta = next.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        u = next;
        deltas.push(delta);
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(SafetyField {
        grid: grid.clone(),
        u,
        deltas,
        converged,
    })
}

/// Full computation from `U = 0`.
pub fn compute_safety(
    grid: &SafetyGrid,
    noise: &NoiseModel,
    cfg: &SculptConfig,
    integ: &IntegratorConfig,
    p: &LorenzParams,
    threads: usize,
) -> Result<SafetyField> {
    let images = compute_images(grid, noise, cfg.tau, integ, p)?;
    compute_safety_from(grid, &images, vec![0.0; grid.len()], cfg, threads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

impl SafetyField {
    /// Safety value at `s`, or `None` outside the region.
    pub fn value(&self, s: State3, mode: Interpolation) -> Option<f64> {
        let g = &self.grid;
        if !g.region.contains(s) {
            return None;
        }
        let a = s.to_array();
        let h = g.spacing();
        let mut cell = [0usize; 3];
        let mut t = [0.0; 3];
        for ax in 0..3 {
            let x = (a[ax] - g.region.lo[ax]) / h[ax];
            let c = (x.floor() as usize).min(g.res[ax] - 2);
            cell[ax] = c;
            t[ax] = (x - c as f64).clamp(0.0, 1.0);
        }
        match mode {
            Interpolation::Nearest => {
                let r = [0, 1, 2].map(|ax| cell[ax] + usize::from(t[ax] >= 0.5));
                Some(self.u[g.index(r[0], r[1], r[2])])
            }
            Interpolation::Trilinear => {
                let at = |dx: usize, dy: usize, dz: usize| self.u[g.index(cell[0] + dx, cell[1] + dy, cell[2] + dz)];
                let plane = |dx: usize| {
                    let a = lerp(at(dx, 0, 0), at(dx, 0, 1), t[2]);
                    let b = lerp(at(dx, 1, 0), at(dx, 1, 1), t[2]);
                    lerp(a, b, t[1])
                };
                Some(lerp(plane(0), plane(1), t[0]))
            }
        }
    }

    /// Per-state labels of a trajectory.
    pub fn label(&self, states: &[State3], mode: Interpolation) -> Vec<Option<f64>> {
        states.iter().map(|s| self.value(*s, mode)).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["ix", "iy", "iz", "x", "y", "z", "u"])?;
        for (i, (q, u)) in self.grid.nodes.iter().zip(&self.u).enumerate() {
            let [ix, iy, iz] = self.grid.unindex(i);
            w.write_record(&[
                ix.to_string(),
                iy.to_string(),
                iz.to_string(),
                q.x.to_string(),
                q.y.to_string(),
                q.z.to_string(),
                u.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "sup_delta"])?;
        for (k, d) in self.deltas.iter().enumerate() {
            w.write_record(&[(k + 1).to_string(), d.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Binary cache: magic, region, resolution, convergence flag, values.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        for v in self.grid.region.lo.iter().chain(&self.grid.region.hi) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for n in self.grid.res {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        out.push(u8::from(self.converged));
        out.extend_from_slice(&(self.deltas.len() as u32).to_le_bytes());
        for v in self.deltas.iter().chain(&self.u) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPrerequisite(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        let mut c = ByteCursor::new(&bytes, path);
        if c.take(CACHE_MAGIC.len())? != CACHE_MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for v in lo.iter_mut().chain(hi.iter_mut()) {
            *v = c.f64()?;
        }
        let res = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
        let converged = c.take(1)?[0] != 0;
        let nd = c.u32()? as usize;
        let grid = SafetyGrid::new(SafetyRegion { lo, hi }, res)?;
        let deltas = (0..nd).map(|_| c.f64()).collect::<Result<_>>()?;
        let u = (0..grid.len()).map(|_| c.f64()).collect::<Result<_>>()?;
        Ok(Self {
            grid,
            u,
            deltas,
            converged,
        })
    }
}

/// Exact at both ends and for equal endpoints.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if a == b {
        a
    } else {
        (1.0 - t) * a + t * b
    }
}

const CACHE_MAGIC: &[u8] = b"KTLSAFE1";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_grid_geometry() {
        let g = SafetyGrid::new(SafetyRegion::default(), [30, 30, 30]).unwrap();
        assert_eq!(g.len(), 27_000);
        assert_eq!(g.nodes[0], State3::new(0.0, -50.0, -50.0));
        assert_eq!(g.nodes[26_999], State3::new(50.0, 50.0, 50.0));
        assert!((g.spacing()[0] - 50.0 / 29.0).abs() < 1e-15);
        assert!((g.spacing()[0] - 1.7241).abs() < 1e-4);
        for i in [0, 17, 4321, 26_999] {
            let [a, b, c] = g.unindex(i);
            assert_eq!(g.index(a, b, c), i);
        }
    }

    fn hand_images(grid: &SafetyGrid, pts: Vec<State3>) -> Images {
        assert_eq!(pts.len(), grid.len());
        Images {
            per_node: 1,
            points: pts,
        }
    }

    #[test]
    fn fixed_point_node_stays_at_zero() {
        let grid = SafetyGrid::new(
            SafetyRegion {
                lo: [0.0; 3],
                hi: [1.0; 3],
            },
            [2, 2, 2],
        )
        .unwrap();
        let im = hand_images(&grid, grid.nodes.clone());
        let u = sculpt_naive(&vec![0.0; 8], &grid, &im);
        assert!(u.iter().all(|v| *v == 0.0));
        assert_eq!(sculpt_pruned(&vec![0.0; 8], &grid, &im, 1), u);
    }

    #[test]
    fn hand_computed_two_node_update() {
        let grid = SafetyGrid::new(
            SafetyRegion {
                lo: [0.0, 0.0, 0.0],
                hi: [3.0, 1.0, 1.0],
            },
            [2, 2, 2],
        )
        .unwrap();
        let mut pts = grid.nodes.clone();
        pts[0] = State3::new(-4.0, 0.0, 0.0);
        let mut u = vec![0.0; 8];
        u[0] = 10.0;
        let next = sculpt_naive(&u, &grid, &im_from(&grid, pts.clone()));
        // nearest zero-valued nodes to (-4, 0, 0) are (0, 1, 0) and (0, 0, 1)
        assert_eq!(next[0], 17f64.sqrt());
        assert_eq!(next[1], 0.0);
        assert_eq!(sculpt_pruned(&u, &grid, &im_from(&grid, pts), 1), next);
    }

    fn im_from(grid: &SafetyGrid, pts: Vec<State3>) -> Images {
        hand_images(grid, pts)
    }

    #[test]
    fn trilinear_at_nodes_and_centres() {
        let grid = SafetyGrid::new(
            SafetyRegion {
                lo: [0.0; 3],
                hi: [2.0; 3],
            },
            [3, 3, 3],
        )
        .unwrap();
        let u: Vec<f64> = (0..27).map(|i| (i * i % 11) as f64).collect();
        let f = SafetyField {
            grid: grid.clone(),
            u: u.clone(),
            deltas: vec![],
            converged: true,
        };
        for (i, q) in grid.nodes.iter().enumerate() {
            assert_eq!(f.value(*q, Interpolation::Trilinear), Some(u[i]));
            assert_eq!(f.value(*q, Interpolation::Nearest), Some(u[i]));
        }
        let c = f.value(State3::new(0.5, 0.5, 0.5), Interpolation::Trilinear).unwrap();
        let mut avg = 0.0;
        for ix in 0..2 {
            for iy in 0..2 {
                for iz in 0..2 {
                    avg += u[grid.index(ix, iy, iz)] / 8.0;
                }
            }
        }
        assert!((c - avg).abs() < 1e-12);
        assert_eq!(f.value(State3::new(-0.1, 0.0, 0.0), Interpolation::Trilinear), None);
    }

    #[test]
    fn pruned_matches_naive_on_lorenz_grid() {
        let grid = SafetyGrid::new(SafetyRegion::default(), [7, 6, 5]).unwrap();
        let noise = NoiseModel::axis_extremes(State3::new(0.3, 0.3, 0.3));
        let p = LorenzParams::default();
        let im = compute_images(&grid, &noise, 0.1, &IntegratorConfig::default(), &p).unwrap();
        let mut u = vec![0.0; grid.len()];
        for _ in 0..6 {
            let a = sculpt_naive(&u, &grid, &im);
            assert_eq!(sculpt_pruned(&u, &grid, &im, 1), a);
            assert_eq!(sculpt_pruned(&u, &grid, &im, 3), a);
            assert!(a.iter().zip(&u).all(|(n, o)| n >= o));
            u = a;
        }
    }

    #[test]
    fn noise_samples() {
        assert_eq!(NoiseModel::none().samples, vec![State3::ORIGIN]);
        let n = NoiseModel::axis_extremes(State3::new(0.5, 0.0, 1.0));
        assert_eq!(n.samples.len(), 5);
        assert!(n.samples.contains(&State3::new(0.0, 0.0, -1.0)));
    }

    #[test]
    fn cache_round_trip() {
        let grid = SafetyGrid::new(SafetyRegion::default(), [2, 3, 2]).unwrap();
        let f = SafetyField {
            u: (0..12).map(|v| v as f64 * 0.1).collect(),
            grid,
            deltas: vec![1.0, 0.5],
            converged: false,
        };
        let dir = std::env::temp_dir().join(format!("ktl-safety-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("u.bin");
        f.write_cache(&p).unwrap();
        assert_eq!(SafetyField::read_cache(&p).unwrap(), f);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
