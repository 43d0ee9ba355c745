//! Principal component analysis and the physics-informed 9-feature pipeline.

use crate::dataset::Normalizer;
use crate::error::{Error, Result};
use crate::sim::{lorenz_deriv, LorenzParams, State3};
use crate::tensor::{Checkpoint, Tensor};

/// Eigenvalues at or below this fraction of the largest count as zero rank.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k x d`, rows orthonormal, ordered by descending variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues and unit eigenvectors (as rows), unsorted.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| m[i][i]).collect();
    // columns of v are eigenvectors
    let vecs = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (vals, vecs)
}

impl PcaModel {
    /// Fits `k` components to the rows of `x`. Fails with `RankDeficient`
    /// when the covariance has fewer than `k` nonzero eigenvalues.
    pub fn fit(x: &[Vec<f64>], k: usize) -> Result<Self> {
        Self::fit_with(x, k, true)
    }

    /// As [`PcaModel::fit`]; with `strict = false` degenerate directions are
    /// kept with zero variance.
    pub fn fit_with(x: &[Vec<f64>], k: usize, strict: bool) -> Result<Self> {
        let n = x.len();
        let d = x.first().map_or(0, Vec::len);
        if n == 0 || d == 0 {
            return Err(Error::EmptyInput);
        }
        if k == 0 || k > d || n <= k {
            return Err(Error::ConfigInvalid {
                field: "pca.k".into(),
                reason: format!("need 0 < k <= {d} and k < n = {n}, got k = {k}"),
            });
        }
        let mut mean = vec![0.0; d];
        for row in x {
            for j in 0..d {
                mean[j] += row[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![vec![0.0; d]; d];
        for row in x {
            for i in 0..d {
                let ci = row[i] - mean[i];
                for j in i..d {
                    cov[i][j] += ci * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i][j] /= (n - 1) as f64;
                cov[j][i] = cov[i][j];
            }
        }
        let (vals, vecs) = jacobi_eigen(&cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|a, b| vals[*b].total_cmp(&vals[*a]).then(a.cmp(b)));
        let top = vals[order[0]].max(0.0);
        let rank = vals.iter().filter(|v| **v > RANK_TOL * top).count();
        if strict && rank < k {
            return Err(Error::RankDeficient { rank, k });
        }
        let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
        let mut components = Vec::with_capacity(k);
        let mut var = Vec::with_capacity(k);
        for &i in order.iter().take(k) {
            let mut c = vecs[i].clone();
            let lead = c
                .iter()
                .enumerate()
                .fold(0, |best, (j, v)| if v.abs() > c[best].abs() { j } else { best });
            if c[lead] < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            components.push(c);
            var.push(vals[i].max(0.0));
        }
        let ratio = var
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect();
        Ok(Self {
            mean,
            components,
            explained_variance: var,
            explained_variance_ratio: ratio,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn d(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    /// Applies the rotation only, without centring.
    pub fn rotate(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v).map(|(c, x)| c * x).sum())
            .collect()
    }

    pub fn inverse_transform(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, zi) in self.components.iter().zip(z) {
            for (o, cj) in out.iter_mut().zip(c) {
                *o += zi * cj;
            }
        }
        out
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            components: (0..d)
                .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            explained_variance: vec![1.0; d],
            explained_variance_ratio: vec![1.0 / d as f64; d],
        }
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint, namespace: &str) {
        let (k, d) = (self.k(), self.d());
        ckpt.insert(format!("{namespace}/mean"), Tensor::new(&[d], self.mean.clone()).expect("sized"));
        ckpt.insert(
            format!("{namespace}/components"),
            Tensor::new(&[k, d], self.components.concat()).expect("sized"),
        );
        ckpt.insert(
            format!("{namespace}/explained_variance"),
            Tensor::new(&[k], self.explained_variance.clone()).expect("sized"),
        );
        ckpt.insert(
            format!("{namespace}/explained_variance_ratio"),
            Tensor::new(&[k], self.explained_variance_ratio.clone()).expect("sized"),
        );
    }

    pub fn read_from(ckpt: &Checkpoint, namespace: &str) -> Result<Self> {
        let get = |name: &str| {
            let key = format!("{namespace}/{name}");
            ckpt.get(&key)
                .cloned()
                .ok_or_else(|| Error::format("<checkpoint>", format!("missing tensor {key}")))
        };
        let comps = get("components")?;
        Ok(Self {
            mean: get("mean")?.into_data(),
            components: (0..comps.rows()).map(|i| comps.row(i).to_vec()).collect(),
            explained_variance: get("explained_variance")?.into_data(),
            explained_variance_ratio: get("explained_variance_ratio")?.into_data(),
        })
    }
}

/// Nine physics-informed features of a raw state: the first PCA scores of
/// the normalised state, the normalised Lorenz velocity rotated into the same
/// basis, then `sin`, `cos` of the polar angle of the first two scores and
/// their radius. `atan2(0, 0)` is taken as 0.
pub fn pi_features(s: State3, pca1: &PcaModel, norm: &Normalizer, p: &LorenzParams) -> [f64; 9] {
    let z = pca1.transform(&norm.apply(s).to_array());
    let v = pca1.rotate(&norm.apply_rate(lorenz_deriv(s, p)).to_array());
    let theta = if z[0] == 0.0 && z[1] == 0.0 {
        0.0
    } else {
        z[1].atan2(z[0])
    };
    [
        z[0],
        z[1],
        z[2],
        v[0],
        v[1],
        v[2],
        theta.sin(),
        theta.cos(),
        z[0].hypot(z[1]),
    ]
}

/// Two-stage physics-informed embedder producing 9 dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PiEmbedder {
    pub pca1: PcaModel,
    pub pca2: PcaModel,
    pub params: LorenzParams,
}

impl PiEmbedder {
    pub const DIM: usize = 9;

    /// Fits the state PCA on normalised states, then the feature PCA on the
    /// features of every training state.
    pub fn fit<'a>(
        states: impl IntoIterator<Item = &'a State3> + Clone,
        norm: &Normalizer,
        params: LorenzParams,
    ) -> Result<Self> {
        let xs: Vec<Vec<f64>> = states
            .clone()
            .into_iter()
            .map(|s| norm.apply(*s).to_array().to_vec())
            .collect();
        let pca1 = PcaModel::fit(&xs, 3)?;
        let feats: Vec<Vec<f64>> = states
            .into_iter()
            .map(|s| pi_features(*s, &pca1, norm, &params).to_vec())
            .collect();
        // dx/dt = sigma (y - x) is linear in the state, so one direction of
        // the feature covariance is exactly null and pca2 has rank 8.
        let pca2 = PcaModel::fit_with(&feats, Self::DIM, false)?;
        Ok(Self { pca1, pca2, params })
    }

    pub fn embed(&self, s: State3, norm: &Normalizer) -> Vec<f64> {
        self.pca2.transform(&pi_features(s, &self.pca1, norm, &self.params))
    }

    /// Recovers a raw state from an embedding via the first three features.
    pub fn decode(&self, e: &[f64], norm: &Normalizer) -> State3 {
        let f = self.pca2.inverse_transform(e);
        let x = self.pca1.inverse_transform(&f[..3]);
        norm.invert(State3::new(x[0], x[1], x[2]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng as _;

    fn orthonormal(m: &PcaModel) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in m.components.iter().enumerate() {
            for (j, b) in m.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let a = vec![vec![2.0, 1.0, 0.0], vec![1.0, 2.0, 0.0], vec![0.0, 0.0, 5.0]];
        let (mut vals, _) = jacobi_eigen(&a);
        vals.sort_by(f64::total_cmp);
        for (v, e) in vals.iter().zip([1.0, 3.0, 5.0]) {
            assert!((v - e).abs() < 1e-13);
        }
    }

    #[test]
    fn full_rank_fit_properties() {
        let mut rng = stream_rng(4, 0);
        let xs: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                let a: f64 = rng.random_range(-1.0..1.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                let c: f64 = rng.random_range(-1.0..1.0);
                vec![3.0 * a + b, a - 2.0 * c + 5.0, 0.3 * b]
            })
            .collect();
        let m = PcaModel::fit(&xs, 3).unwrap();
        assert!(orthonormal(&m) < 1e-10);
        let r = &m.explained_variance_ratio;
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(r.windows(2).all(|w| w[0] >= w[1]));
        for x in &xs[..20] {
            let back = m.inverse_transform(&m.transform(x));
            for (a, b) in back.iter().zip(x) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        let z = m.transform(&m.mean);
        assert!(z.iter().all(|v| v.abs() < 1e-12));
        for c in &m.components {
            let lead = c.iter().fold(0.0f64, |a, v| if v.abs() > a.abs() { *v } else { a });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn planar_data() {
        let xs: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i as f64).sin() * 3.0, (i as f64 * 0.7).cos(), 0.0])
            .collect();
        assert!(matches!(
            PcaModel::fit(&xs, 3),
            Err(Error::RankDeficient { rank: 2, k: 3 })
        ));
        let m = PcaModel::fit_with(&xs, 3, false).unwrap();
        assert!(m.explained_variance_ratio[2] < 1e-12);
    }

    #[test]
    fn hand_evaluated_features() {
        let f = pi_features(
            State3::new(1.0, 2.0, 3.0),
            &PcaModel::identity(3),
            &Normalizer::identity(),
            &LorenzParams::default(),
        );
        let r5 = 5f64.sqrt();
        let expect = [1.0, 2.0, 3.0, 10.0, 23.0, -6.0, 2.0 / r5, 1.0 / r5, r5];
        for (a, b) in f.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{f:?}");
        }
    }

    #[test]
    fn zero_angle_at_origin() {
        let f = pi_features(
            State3::ORIGIN,
            &PcaModel::identity(3),
            &Normalizer::identity(),
            &LorenzParams::default(),
        );
        assert_eq!((f[6], f[7], f[8]), (0.0, 1.0, 0.0));
    }
}
