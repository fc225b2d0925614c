//! Distances between weighted sample clouds and the two-sample machinery
//! built on them.
//!
//! Metrics are trait objects looked up by name in a [`MetricRegistry`], so
//! the CLI and the acceptance suite can select them from configuration.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;

pub trait TransportMetric: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64>;
}

/// Named collection of metrics.
#[derive(Clone, Default)]
pub struct MetricRegistry {
    entries: BTreeMap<String, Arc<dyn TransportMetric>>,
}

impl MetricRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// `w1_sorted` and `energy`.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(W1Sorted));
        r.register(Arc::new(Energy));
        r
    }

    pub fn register(&mut self, metric: Arc<dyn TransportMetric>) {
        self.entries.insert(metric.name().to_string(), metric);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn TransportMetric>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::domain(format!("unknown metric `{name}`; available: {}", self.names().join(", ")))
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

/// Distance between two clouds by metric name from the standard registry.
pub fn transport_distance(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, kind: &str) -> Result<f64> {
    MetricRegistry::standard().get(kind)?.distance(mu, nu)
}

fn check_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            found: nu.dim(),
        });
    }
    Ok(())
}

/// One-dimensional Wasserstein-1 via the quantile coupling,
/// `∫ |F_mu - F_nu| dx`. For equal sizes and weights this is the mean
/// absolute difference of the sorted samples.
pub struct W1Sorted;

impl TransportMetric for W1Sorted {
    fn name(&self) -> &str {
        "w1_sorted"
    }

    fn distance(&self, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
        check_pair(mu, nu)?;
        if mu.dim() != 1 {
            return Err(Error::domain("w1_sorted requires one-dimensional measures"));
        }
        let a = sorted_weighted(mu.samples(), mu.weights());
        let b = sorted_weighted(nu.samples(), nu.weights());
        let (mut i, mut j) = (0, 0);
        let (mut fa, mut fb) = (0.0f64, 0.0f64);
        let mut prev = a[0].0.min(b[0].0);
        let mut acc = 0.0;
        while i < a.len() || j < b.len() {
            let next = match (a.get(i), b.get(j)) {
                (Some(p), Some(q)) => p.0.min(q.0),
                (Some(p), None) => p.0,
                (None, Some(q)) => q.0,
                (None, None) => unreachable!(),
            };
            acc += (fa - fb).abs() * (next - prev);
            while i < a.len() && a[i].0 == next {
                fa += a[i].1;
                i += 1;
            }
            while j < b.len() && b[j].0 == next {
                fb += b[j].1;
                j += 1;
            }
            prev = next;
        }
        Ok(acc)
    }
}

/// Energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` with the Euclidean norm.
/// Exact in every dimension: sorted prefix sums in 1D, pairwise sums above.
pub struct Energy;

impl TransportMetric for Energy {
    fn name(&self) -> &str {
        "energy"
    }

    fn distance(&self, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
        check_pair(mu, nu)?;
        if mu.dim() == 1 {
            return Ok(axis_energy(mu.samples(), mu.weights(), nu.samples(), nu.weights(), Axis::Line));
        }
        Ok(pairwise_energy(mu, nu, euclidean))
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Energy distance for an arbitrary metric by exact pairwise sums. Rows are
/// summed sequentially and combined in row order, so the result does not
/// depend on the thread count.
pub fn pairwise_energy<F>(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, dist: F) -> f64
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    let cross = |p: &EmpiricalMeasure, q: &EmpiricalMeasure| -> f64 {
        let rows: Vec<f64> = (0..p.len())
            .into_par_iter()
            .map(|i| {
                let x = p.sample(i);
                let mut s = 0.0;
                for j in 0..q.len() {
                    s += q.weights()[j] * dist(x, q.sample(j));
                }
                p.weights()[i] * s
            })
            .collect();
        rows.iter().sum()
    };
    let e = 2.0 * cross(mu, nu) - cross(mu, mu) - cross(nu, nu);
    e.max(0.0)
}

/// Geometry of one coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Axis {
    Line,
    /// Circle of the given circumference with the arc-length metric.
    Circle(f64),
}

impl Axis {
    /// Representative in `[0, L)` on a circle; the identity on the line.
    pub fn reduce(self, a: f64) -> f64 {
        match self {
            Axis::Line => a,
            Axis::Circle(len) => {
                let r = a.rem_euclid(len);
                if r >= len {
                    0.0
                } else {
                    r
                }
            }
        }
    }

    pub fn distance(self, a: f64, b: f64) -> f64 {
        match self {
            Axis::Line => (a - b).abs(),
            Axis::Circle(len) => {
                let d = (a - b).abs().rem_euclid(len);
                d.min(len - d)
            }
        }
    }
}

fn sorted_weighted(xs: &[f64], ws: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = xs.iter().copied().zip(ws.iter().copied()).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// Sorted support with prefix sums, answering `Σ_j w_j d(x, y_j)` in
/// logarithmic time. On a circle the support is split into four arcs around
/// the query point; an atom on an arc boundary has the same distance under
/// both neighbouring formulas, so rounding in the boundaries cannot count it
/// twice or drop it.
struct PrefixCloud {
    pts: Vec<f64>,
    cw: Vec<f64>,
    cs: Vec<f64>,
    axis: Axis,
}

impl PrefixCloud {
    fn new(xs: &[f64], ws: &[f64], axis: Axis) -> Self {
        let xs: Vec<f64> = xs.iter().map(|&x| axis.reduce(x)).collect();
        let v = sorted_weighted(&xs, ws);
        let mut cw = Vec::with_capacity(v.len() + 1);
        let mut cs = Vec::with_capacity(v.len() + 1);
        let (mut a, mut b) = (0.0, 0.0);
        cw.push(0.0);
        cs.push(0.0);
        for &(x, w) in &v {
            a += w;
            b += w * x;
            cw.push(a);
            cs.push(b);
        }
        PrefixCloud {
            pts: v.into_iter().map(|p| p.0).collect(),
            cw,
            cs,
            axis,
        }
    }

    fn lower_bound(&self, x: f64) -> usize {
        self.pts.partition_point(|&p| p < x)
    }

    /// Weight and first moment of the atoms with index in `[i, j)`.
    fn range(&self, i: usize, j: usize) -> (f64, f64) {
        (self.cw[j] - self.cw[i], self.cs[j] - self.cs[i])
    }

    fn mean_distance_from(&self, x: f64) -> f64 {
        let x = self.axis.reduce(x);
        let n = self.pts.len();
        let mid = self.lower_bound(x);
        match self.axis {
            Axis::Line => {
                let (wl, sl) = self.range(0, mid);
                let (wr, sr) = self.range(mid, n);
                (x * wl - sl) + (sr - x * wr)
            }
            Axis::Circle(len) => {
                let half = len / 2.0;
                let lo = self.lower_bound(x - half);
                let hi = self.lower_bound(x + half);
                let (wa, sa) = self.range(0, lo);
                let (wb, sb) = self.range(lo, mid);
                let (wc, sc) = self.range(mid, hi);
                let (wd, sd) = self.range(hi, n);
                ((len - x) * wa + sa) + (x * wb - sb) + (sc - x * wc) + ((len + x) * wd - sd)
            }
        }
    }
}

fn cross_sum(xs: &[f64], wx: &[f64], cloud: &PrefixCloud) -> f64 {
    let mut s = 0.0;
    for (x, w) in xs.iter().zip(wx) {
        s += w * cloud.mean_distance_from(*x);
    }
    s
}

/// Energy distance between two weighted samples on one axis.
pub fn axis_energy(xs: &[f64], wx: &[f64], ys: &[f64], wy: &[f64], axis: Axis) -> f64 {
    let cx = PrefixCloud::new(xs, wx, axis);
    let cy = PrefixCloud::new(ys, wy, axis);
    let e = 2.0 * cross_sum(xs, wx, &cy) - cross_sum(xs, wx, &cx) - cross_sum(ys, wy, &cy);
    e.max(0.0)
}

/// Outcome of a two-sample permutation test on a transport distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub level: f64,
    pub n_resamples: usize,
    /// Mean of the relabelled distances.
    pub null_mean: f64,
    pub passed: bool,
}

/// Distances between random splits of the pooled atoms into groups of the
/// original sizes. With strata, atoms are only exchanged within a stratum
/// and each stratum keeps its original split sizes.
fn relabelled_distances(
    metric: &dyn TransportMetric,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    strata: Option<(&[u32], &[u32])>,
    n_resamples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_pair(mu, nu)?;
    let pooled = mu.concat(nu)?;
    let n_mu = mu.len();
    let labels: Vec<u32> = match strata {
        Some((a, b)) => {
            if a.len() != mu.len() || b.len() != nu.len() {
                return Err(Error::domain("one stratum label per atom is required"));
            }
            a.iter().chain(b).copied().collect()
        }
        None => vec![0; pooled.len()],
    };
    let mut groups: BTreeMap<u32, (Vec<usize>, usize)> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        let g = groups.entry(l).or_default();
        g.0.push(i);
        if i < n_mu {
            g.1 += 1;
        }
    }
    (0..n_resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut left = Vec::with_capacity(n_mu);
            let mut right = Vec::with_capacity(pooled.len() - n_mu);
            for (idx, k) in groups.values() {
                let mut idx = idx.clone();
                idx.shuffle(&mut rng);
                left.extend_from_slice(&idx[..*k]);
                right.extend_from_slice(&idx[*k..]);
            }
            let a = pooled.select_uniform(&left);
            let b = pooled.select_uniform(&right);
            metric.distance(&a, &b)
        })
        .collect()
}

/// Permutation test of `mu = nu`. Resamples split the pooled atoms at random
/// with uniform weights; the statistic passes when it does not exceed the
/// `1 - level` quantile of the relabelled distances.
pub fn permutation_test(
    metric: &dyn TransportMetric,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<PermutationTest> {
    if n_resamples == 0 || !(0.0 < level && level < 1.0) {
        return Err(Error::domain("permutation test needs resamples and a level in (0, 1)"));
    }
    let statistic = metric.distance(mu, nu)?;
    let mut null = relabelled_distances(metric, mu, nu, None, n_resamples, seed)?;
    let null_mean = null.iter().sum::<f64>() / n_resamples as f64;
    let exceed = null.iter().filter(|&&d| d >= statistic).count();
    null.sort_by(f64::total_cmp);
    let q = (((1.0 - level) * n_resamples as f64).ceil() as usize).clamp(1, n_resamples) - 1;
    let critical_value = null[q];
    Ok(PermutationTest {
        statistic,
        critical_value,
        p_value: (1 + exceed) as f64 / (n_resamples + 1) as f64,
        level,
        n_resamples,
        null_mean,
        passed: statistic <= critical_value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseFloor {
    pub mean: f64,
    pub std_dev: f64,
    pub n_relabel: usize,
}

/// Monte-Carlo noise floor from two independent estimates of one measure:
/// the mean distance over random relabellings of their pooled atoms. It is
/// the expected distance between two estimates of these sizes, with far less
/// scatter than a single estimate-to-estimate distance.
pub fn noise_floor(
    metric: &dyn TransportMetric,
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    n_relabel: usize,
    seed: u64,
) -> Result<NoiseFloor> {
    noise_floor_stratified(metric, a, b, None, n_relabel, seed)
}

/// [`noise_floor`] for stratified estimates (for instance one stratum per
/// parameter-grid cell): relabelling stays inside each stratum, so the floor
/// is the expected distance between two independent stratified rebuilds.
pub fn noise_floor_stratified(
    metric: &dyn TransportMetric,
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    strata: Option<(&[u32], &[u32])>,
    n_relabel: usize,
    seed: u64,
) -> Result<NoiseFloor> {
    if n_relabel < 2 {
        return Err(Error::domain("noise floor needs at least two relabellings"));
    }
    let d = relabelled_distances(metric, a, b, strata, n_relabel, seed)?;
    let mean = d.iter().sum::<f64>() / n_relabel as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n_relabel - 1) as f64;
    Ok(NoiseFloor {
        mean,
        std_dev: var.sqrt(),
        n_relabel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::standard_normal;

    fn cloud(xs: Vec<f64>) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(1, xs).unwrap()
    }

    fn brute_axis(xs: &[f64], ys: &[f64], axis: Axis) -> f64 {
        let cross = |a: &[f64], b: &[f64]| {
            let mut s = 0.0;
            for x in a {
                for y in b {
                    s += axis.distance(*x, *y);
                }
            }
            s / (a.len() * b.len()) as f64
        };
        2.0 * cross(xs, ys) - cross(xs, xs) - cross(ys, ys)
    }

    #[test]
    fn self_distance_is_exactly_zero() {
        let mu = cloud((0..500).map(|i| standard_normal(1, i, 0)).collect());
        for name in ["w1_sorted", "energy"] {
            assert_eq!(transport_distance(&mu, &mu, name).unwrap(), 0.0);
        }
    }

    #[test]
    fn point_masses_are_translation_apart() {
        let a = cloud(vec![0.0]);
        let b = cloud(vec![3.0]);
        assert_eq!(transport_distance(&a, &b, "w1_sorted").unwrap(), 3.0);
        // 2|0-3| - 0 - 0
        assert_eq!(transport_distance(&a, &b, "energy").unwrap(), 6.0);
    }

    #[test]
    fn translated_normals_have_unit_w1() {
        let n = 10_000;
        let a = cloud((0..n).map(|i| standard_normal(5, i, 0)).collect());
        let b = cloud((0..n).map(|i| 1.0 + standard_normal(6, i, 0)).collect());
        let d = transport_distance(&a, &b, "w1_sorted").unwrap();
        assert!((d - 1.0).abs() < 0.05, "{d}");
    }

    #[test]
    fn w1_matches_sorted_mean_difference() {
        let xs: Vec<f64> = (0..300).map(|i| standard_normal(7, i, 0)).collect();
        let ys: Vec<f64> = (0..300).map(|i| 0.3 * standard_normal(8, i, 0)).collect();
        let mut sx = xs.clone();
        let mut sy = ys.clone();
        sx.sort_by(f64::total_cmp);
        sy.sort_by(f64::total_cmp);
        let expect = sx.iter().zip(&sy).map(|(a, b)| (a - b).abs()).sum::<f64>() / 300.0;
        let d = transport_distance(&cloud(xs), &cloud(ys), "w1_sorted").unwrap();
        assert!((d - expect).abs() < 1e-12);
    }

    #[test]
    fn fast_energy_matches_pairwise_sums() {
        let xs: Vec<f64> = (0..200).map(|i| standard_normal(9, i, 0)).collect();
        let ys: Vec<f64> = (0..150).map(|i| 0.5 + standard_normal(10, i, 0)).collect();
        let fast = transport_distance(&cloud(xs.clone()), &cloud(ys.clone()), "energy").unwrap();
        assert!((fast - brute_axis(&xs, &ys, Axis::Line)).abs() < 1e-12);
        let pw = pairwise_energy(&cloud(xs), &cloud(ys), euclidean);
        assert!((fast - pw).abs() < 1e-12);
    }

    #[test]
    fn circle_energy_matches_pairwise_sums() {
        let len = 2f64.sqrt();
        let xs: Vec<f64> = (0..200).map(|i| crate::noise::counter_uniform(1, i, 0) * len).collect();
        let ys: Vec<f64> = (0..170).map(|i| (crate::noise::counter_uniform(2, i, 0).powi(2)) * len).collect();
        let w = |n: usize| vec![1.0 / n as f64; n];
        let fast = axis_energy(&xs, &w(200), &ys, &w(170), Axis::Circle(len));
        assert!((fast - brute_axis(&xs, &ys, Axis::Circle(len))).abs() < 1e-12);
        assert!((Axis::Circle(1.0).distance(0.01, 0.99) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn circle_energy_counts_antipodal_ties_once() {
        // lattices with repeated and exactly antipodal atoms
        for (len, n) in [(1.0, 1000), (2f64.sqrt(), 64)] {
            let xs: Vec<f64> = (0..3 * n).map(|i| (i % n) as f64 * len / n as f64).collect();
            let ys: Vec<f64> = (0..2 * n).map(|i| ((i * 7) % n) as f64 * len / n as f64 + 0.3 * len / n as f64).collect();
            let w = |m: usize| vec![1.0 / m as f64; m];
            let fast = axis_energy(&xs, &w(xs.len()), &ys, &w(ys.len()), Axis::Circle(len));
            assert!((fast - brute_axis(&xs, &ys, Axis::Circle(len))).abs() < 1e-12, "{len}");
            assert!(axis_energy(&xs, &w(xs.len()), &xs, &w(xs.len()), Axis::Circle(len)).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_metric_lists_alternatives() {
        let err = MetricRegistry::standard().get("sinkhorn").err().unwrap().to_string();
        assert!(err.contains("energy") && err.contains("w1_sorted"));
    }

    #[test]
    fn permutation_test_separates_shifted_clouds() {
        let a = cloud((0..400).map(|i| standard_normal(11, i, 0)).collect());
        let b = cloud((0..400).map(|i| standard_normal(12, i, 0)).collect());
        let c = cloud((0..400).map(|i| 0.5 + standard_normal(13, i, 0)).collect());
        let same = permutation_test(&Energy, &a, &b, 200, 0.01, 1).unwrap();
        let diff = permutation_test(&Energy, &a, &c, 200, 0.01, 1).unwrap();
        assert!(same.passed, "{same:?}");
        assert!(!diff.passed && diff.p_value < 0.01, "{diff:?}");
    }

    #[test]
    fn permutation_results_do_not_depend_on_thread_count() {
        let a = cloud((0..100).map(|i| standard_normal(14, i, 0)).collect());
        let b = cloud((0..120).map(|i| standard_normal(15, i, 0)).collect());
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| permutation_test(&Energy, &a, &b, 50, 0.05, 3).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn noise_floor_tracks_sample_size() {
        let mk = |seed, n| cloud((0..n).map(|i| standard_normal(seed, i as i64, 0)).collect());
        let small = noise_floor(&W1Sorted, &mk(1, 200), &mk(2, 200), 40, 0).unwrap();
        let large = noise_floor(&W1Sorted, &mk(3, 3200), &mk(4, 3200), 40, 0).unwrap();
        let ratio = small.mean / large.mean;
        assert!((2.8..5.5).contains(&ratio), "{ratio}");
    }
}
