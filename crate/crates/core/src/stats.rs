//! Regression metrics, paired significance tests and the spatial error map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{lorenz_deriv, LorenzParams, State3};

fn check_pair(y: &[f64], yhat: &[f64], op: &'static str) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::shape(op, &[y.len()], &[yhat.len()]));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, "mse")?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, "mae")?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// `1 - SS_res / SS_tot` with the mean of `y` as reference.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, "r2")?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub traj_id: usize,
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
    pub n_points: usize,
}

/// Metrics within each trajectory. `samples` holds `(traj_id, truth,
/// prediction)`; trajectories with fewer than two points or constant truth
/// have no defined R² and are left out. Output is sorted by id.
pub fn per_trajectory(samples: &[(usize, f64, f64)]) -> Vec<TrajectoryMetrics> {
    let mut groups: std::collections::BTreeMap<usize, (Vec<f64>, Vec<f64>)> = Default::default();
    for &(id, y, p) in samples {
        let e = groups.entry(id).or_default();
        e.0.push(y);
        e.1.push(p);
    }
    groups
        .into_iter()
        .filter(|(_, (y, _))| y.len() >= 2)
        .filter_map(|(id, (y, p))| {
            Some(TrajectoryMetrics {
                traj_id: id,
                mse: mse(&y, &p).ok()?,
                mae: mae(&y, &p).ok()?,
                r2: r2(&y, &p).ok()?,
                n_points: y.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

pub fn mean_std(v: &[f64]) -> Result<MeanStd> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(MeanStd { mean, std })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Mse,
    Mae,
    R2,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mse, Metric::Mae, Metric::R2];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Mse => "MSE",
            Metric::Mae => "MAE",
            Metric::R2 => "R2",
        }
    }

    pub fn of(&self, m: &TrajectoryMetrics) -> f64 {
        match self {
            Metric::Mse => m.mse,
            Metric::Mae => m.mae,
            Metric::R2 => m.r2,
        }
    }

    pub fn higher_is_better(&self) -> bool {
        matches!(self, Metric::R2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub mse: MeanStd,
    pub mae: MeanStd,
    pub r2: MeanStd,
    pub n_traj: usize,
}

pub fn summarize(metrics: &[TrajectoryMetrics]) -> Result<ModelSummary> {
    let col = |m: Metric| mean_std(&metrics.iter().map(|t| m.of(t)).collect::<Vec<_>>());
    Ok(ModelSummary {
        mse: col(Metric::Mse)?,
        mae: col(Metric::Mae)?,
        r2: col(Metric::R2)?,
        n_traj: metrics.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Non-zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub exact: bool,
}

/// Largest sample size that uses the exact null distribution.
pub const EXACT_MAX_N: usize = 25;
pub const WILCOXON_MIN_N: usize = 5;

/// Average ranks (1-based) of `v`, ties sharing the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test of the paired differences `a - b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::shape("wilcoxon", &[a.len()], &[b.len()]));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    if d.len() < WILCOXON_MIN_N {
        return Err(Error::TooFewSamples {
            n: d.len(),
            min: WILCOXON_MIN_N,
        });
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let n = d.len();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);
    let (p_value, exact) = if n <= EXACT_MAX_N {
        (exact_p(&ranks, statistic), true)
    } else {
        (normal_p(&abs, n, statistic), false)
    };
    Ok(Wilcoxon {
        n,
        w_plus,
        w_minus,
        statistic,
        p_value,
        exact,
    })
}

/// `min(1, 2 P(T <= w))` under the sign-flip null, counting subsets by their
/// doubled rank sum so average ranks stay integral.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut count = vec![0u64; max + 1];
    count[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if count[s] != 0 {
                count[s + r] += count[s];
            }
        }
        reach += r;
    }
    let limit = (2.0 * w).round() as usize;
    let below: u64 = count[..=limit.min(max)].iter().sum();
    let p = 2.0 * below as f64 / 2f64.powi(ranks.len() as i32);
    p.min(1.0)
}

/// Normal approximation with tie and continuity corrections.
fn normal_p(abs: &[f64], n: usize, w: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Per-test level `alpha / m`.
pub fn bonferroni_alpha(alpha: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::ConfigInvalid {
            field: "bonferroni.m".into(),
            reason: "at least one comparison".into(),
        });
    }
    Ok(alpha / m as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRow {
    pub model_a: String,
    pub model_b: String,
    pub metric: Metric,
    pub mean_a: f64,
    pub mean_b: f64,
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub significant: bool,
    /// Set only when significant.
    pub winner: Option<String>,
}

/// Every unordered pair of models on every metric, each tested at
/// `alpha / (number of pairs)`. A pair whose differences all vanish is
/// reported with `p = 1`.
pub fn pairwise_table(models: &[(String, Vec<TrajectoryMetrics>)], alpha: f64) -> Result<Vec<PairwiseRow>> {
    let pairs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|i| (i + 1..models.len()).map(move |j| (i, j)))
        .collect();
    let level = bonferroni_alpha(alpha, pairs.len())?;
    let mut rows = Vec::with_capacity(pairs.len() * Metric::ALL.len());
    for &(i, j) in &pairs {
        let (na, ma) = &models[i];
        let (nb, mb) = &models[j];
        let ids_a: Vec<usize> = ma.iter().map(|m| m.traj_id).collect();
        let ids_b: Vec<usize> = mb.iter().map(|m| m.traj_id).collect();
        if ids_a != ids_b {
            return Err(Error::shape("pairwise_table", &[ids_a.len()], &[ids_b.len()]));
        }
        for metric in Metric::ALL {
            let a: Vec<f64> = ma.iter().map(|m| metric.of(m)).collect();
            let b: Vec<f64> = mb.iter().map(|m| metric.of(m)).collect();
            let (mean_a, mean_b) = (mean_std(&a)?.mean, mean_std(&b)?.mean);
            let (n, statistic, p_value) = match wilcoxon_signed_rank(&a, &b) {
                Ok(w) => (w.n, w.statistic, w.p_value),
                Err(Error::AllZeroDifferences) => (0, 0.0, 1.0),
                Err(e) => return Err(e),
            };
            let significant = p_value < level;
            let a_wins = if metric.higher_is_better() {
                mean_a > mean_b
            } else {
                mean_a < mean_b
            };
            rows.push(PairwiseRow {
                model_a: na.clone(),
                model_b: nb.clone(),
                metric,
                mean_a,
                mean_b,
                n,
                statistic,
                p_value,
                alpha: level,
                significant,
                winner: significant.then(|| if a_wins { na.clone() } else { nb.clone() }),
            });
        }
    }
    Ok(rows)
}

/// Fixed-point scale of accumulated errors. Integer sums are exact and
/// independent of order.
pub const FIXED_SCALE: f64 = (1u128 << 80) as f64;

pub fn to_fixed(v: f64) -> i128 {
    (v * FIXED_SCALE) as i128
}

pub fn from_fixed(v: i128) -> f64 {
    v as f64 / FIXED_SCALE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub state: State3,
    pub truth: f64,
    pub prediction: f64,
}

impl ErrorPoint {
    pub fn l1(&self) -> f64 {
        (self.truth - self.prediction).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadrant {
    pub count: usize,
    /// Absent when the quadrant is empty.
    pub centroid: Option<(f64, f64)>,
    pub mean_velocity: Option<(f64, f64)>,
    pub mean_error: Option<f64>,
}

/// Accumulated L1 error over an x-z histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDensityMap {
    pub x_edges: Vec<f64>,
    pub z_edges: Vec<f64>,
    /// Row-major `[x_bin][z_bin]`, fixed point.
    pub bins: Vec<i128>,
    pub x_marginal: Vec<i128>,
    pub z_marginal: Vec<i128>,
    pub total: i128,
    /// Sum of the per-point fixed-point errors, accumulated separately.
    pub point_sum: i128,
    pub median: (f64, f64),
    /// Top-left, top-right, bottom-right, bottom-left in the x-z plane.
    pub quadrants: [Quadrant; 4],
}

pub const QUADRANT_NAMES: [&str; 4] = ["top-left", "top-right", "bottom-right", "bottom-left"];

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    (0..=n)
        .map(|k| if k == n { hi } else { lo + (hi - lo) * k as f64 / n as f64 })
        .collect()
}

fn bin_of(v: f64, e: &[f64]) -> usize {
    let n = e.len() - 1;
    let k = ((v - e[0]) / (e[n] - e[0]) * n as f64).floor();
    (k.max(0.0) as usize).min(n - 1)
}

/// Histogram of L1 errors over the observed x-z extent with quadrant
/// summaries split at the median point.
pub fn error_density(points: &[ErrorPoint], nx: usize, nz: usize, p: &LorenzParams) -> Result<ErrorDensityMap> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if nx == 0 || nz == 0 {
        return Err(Error::ConfigInvalid {
            field: "density.bins".into(),
            reason: "at least one bin per axis".into(),
        });
    }
    let (mut xs, mut zs): (Vec<f64>, Vec<f64>) = points.iter().map(|q| (q.state.x, q.state.z)).unzip();
    let fold = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    let ((x0, x1), (z0, z1)) = (fold(&xs), fold(&zs));
    let x_edges = edges(x0, x1, nx);
    let z_edges = edges(z0, z1, nz);
    let mut bins = vec![0i128; nx * nz];
    let mut point_sum = 0i128;
    for q in points {
        let e = to_fixed(q.l1());
        point_sum += e;
        bins[bin_of(q.state.x, &x_edges) * nz + bin_of(q.state.z, &z_edges)] += e;
    }
    let x_marginal: Vec<i128> = (0..nx).map(|i| bins[i * nz..(i + 1) * nz].iter().sum()).collect();
    let z_marginal: Vec<i128> = (0..nz).map(|j| (0..nx).map(|i| bins[i * nz + j]).sum()).collect();
    let total = bins.iter().sum();

    let med = (median(&mut xs), median(&mut zs));
    let mut acc = [(0usize, 0.0, 0.0, 0.0, 0.0, 0.0); 4];
    for q in points {
        let right = q.state.x >= med.0;
        let top = q.state.z >= med.1;
        let k = match (top, right) {
            (true, false) => 0,
            (true, true) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        let v = lorenz_deriv(q.state, p);
        let a = &mut acc[k];
        a.0 += 1;
        a.1 += q.state.x;
        a.2 += q.state.z;
        a.3 += v.x;
        a.4 += v.z;
        a.5 += q.l1();
    }
    let quadrants = acc.map(|(c, sx, sz, vx, vz, e)| {
        let n = c as f64;
        Quadrant {
            count: c,
            centroid: (c > 0).then(|| (sx / n, sz / n)),
            mean_velocity: (c > 0).then(|| (vx / n, vz / n)),
            mean_error: (c > 0).then(|| e / n),
        }
    });
    Ok(ErrorDensityMap {
        x_edges,
        z_edges,
        bins,
        x_marginal,
        z_marginal,
        total,
        point_sum,
        median: med,
        quadrants,
    })
}

impl ErrorDensityMap {
    pub fn nx(&self) -> usize {
        self.x_edges.len() - 1
    }

    pub fn nz(&self) -> usize {
        self.z_edges.len() - 1
    }

    /// Both marginals and the per-point sum agree with the total exactly.
    pub fn is_conserved(&self) -> bool {
        self.total == self.point_sum
            && self.x_marginal.iter().sum::<i128>() == self.total
            && self.z_marginal.iter().sum::<i128>() == self.total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_metrics() {
        let y = [1.0, 2.0, 3.0];
        let p = [2.0, 2.0, 2.0];
        assert!((mse(&y, &p).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((mae(&y, &p).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r2(&y, &p).unwrap(), 0.0);
        assert_eq!((mse(&y, &y).unwrap(), mae(&y, &y).unwrap(), r2(&y, &y).unwrap()), (0.0, 0.0, 1.0));
        assert!(matches!(r2(&[2.0, 2.0], &[1.0, 3.0]), Err(Error::ZeroVariance)));
        assert!(matches!(mse(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn per_trajectory_drops_degenerate_groups() {
        let s = [(0, 1.0, 1.5), (0, 2.0, 2.0), (1, 5.0, 4.0), (2, 3.0, 3.0), (2, 3.0, 2.0)];
        let m = per_trajectory(&s);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].traj_id, 0);
        assert_eq!(m[0].n_points, 2);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn six_positive_differences() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w = wilcoxon_signed_rank(&a, &[0.0; 6]).unwrap();
        assert_eq!(w.statistic, 0.0);
        assert!((w.p_value - 2.0 / 64.0).abs() < 1e-15);
        assert!(w.exact);
    }

    #[test]
    fn degenerate_wilcoxon_inputs() {
        assert!(matches!(wilcoxon_signed_rank(&[1.0; 7], &[1.0; 7]), Err(Error::AllZeroDifferences)));
        assert!(matches!(
            wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]),
            Err(Error::TooFewSamples { n: 4, min: 5 })
        ));
    }

    #[test]
    fn normal_path_is_close_to_exact_at_the_crossover() {
        let a: Vec<f64> = (0..25).map(|i| (i as f64 * 1.7).sin() + 0.3).collect();
        let b = vec![0.0; 25];
        let exact = wilcoxon_signed_rank(&a, &b).unwrap();
        let abs: Vec<f64> = a.iter().map(|x| x.abs()).collect();
        let approx = normal_p(&abs, 25, exact.statistic);
        assert!((exact.p_value - approx).abs() < 0.01, "{} vs {approx}", exact.p_value);
        let a26: Vec<f64> = (0..26).map(|i| (i as f64 * 1.7).sin() + 0.3).collect();
        assert!(!wilcoxon_signed_rank(&a26, &[0.0; 26]).unwrap().exact);
    }

    #[test]
    fn bonferroni_levels() {
        assert!((bonferroni_alpha(0.05, 6).unwrap() - 0.008333333333333333).abs() < 1e-18);
        assert_eq!(bonferroni_alpha(0.05, 1).unwrap(), 0.05);
        assert_eq!(bonferroni_alpha(0.01, 4).unwrap(), 0.0025);
        assert!(bonferroni_alpha(0.05, 0).is_err());
    }

    fn metrics(offset: f64, n: usize) -> Vec<TrajectoryMetrics> {
        (0..n)
            .map(|i| TrajectoryMetrics {
                traj_id: i,
                mse: 1.0 + i as f64 * 0.1 + offset,
                mae: 0.5 + i as f64 * 0.01 + offset,
                r2: 0.9 - offset - i as f64 * 0.001,
                n_points: 3,
            })
            .collect()
    }

    #[test]
    fn pairwise_shape_and_winners() {
        let models: Vec<(String, Vec<TrajectoryMetrics>)> = ["A", "B", "C", "D"]
            .iter()
            .enumerate()
            .map(|(k, n)| (n.to_string(), metrics(k as f64 * 0.01, 20)))
            .collect();
        let rows = pairwise_table(&models, 0.05).unwrap();
        assert_eq!(rows.len(), 18);
        assert!((rows[0].alpha - 0.05 / 6.0).abs() < 1e-18);
        for r in &rows {
            assert!((r.p_value - 2.0 * 2f64.powi(-20)).abs() < 1e-18);
            assert!(r.significant);
            assert_eq!(r.winner.as_deref(), Some(r.model_a.as_str()));
        }
    }

    #[test]
    fn self_comparison_is_not_significant() {
        let m = metrics(0.0, 10);
        let rows = pairwise_table(&[("A".into(), m.clone()), ("A2".into(), m)], 0.05).unwrap();
        assert!(rows.iter().all(|r| r.p_value == 1.0 && !r.significant && r.winner.is_none()));
    }

    fn pt(x: f64, z: f64, e: f64) -> ErrorPoint {
        ErrorPoint {
            state: State3::new(x, 1.0, z),
            truth: e,
            prediction: 0.0,
        }
    }

    #[test]
    fn single_point_density() {
        let m = error_density(&[pt(3.0, 4.0, 0.25)], 100, 100, &LorenzParams::default()).unwrap();
        assert_eq!(from_fixed(m.total), 0.25);
        assert_eq!(m.bins.iter().filter(|b| **b != 0).count(), 1);
        assert!(m.is_conserved());
        assert_eq!(m.quadrants[1].count, 1);
        for k in [0, 2, 3] {
            assert_eq!(m.quadrants[k].count, 0);
            assert!(m.quadrants[k].centroid.is_none() && m.quadrants[k].mean_velocity.is_none());
        }
    }

    #[test]
    fn four_points_fill_four_quadrants() {
        let pts = [pt(-1.0, 1.0, 0.1), pt(1.0, 1.0, 0.2), pt(1.0, -1.0, 0.3), pt(-1.0, -1.0, 0.4)];
        let m = error_density(&pts, 10, 10, &LorenzParams::default()).unwrap();
        for (k, q) in pts.iter().enumerate() {
            assert_eq!(m.quadrants[k].centroid, Some((q.state.x, q.state.z)));
            let v = lorenz_deriv(q.state, &LorenzParams::default());
            assert_eq!(m.quadrants[k].mean_velocity, Some((v.x, v.z)));
        }
        assert!(m.is_conserved());
    }
}
