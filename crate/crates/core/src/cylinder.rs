//! The lifted cocycle on the cylinder `[0,τ1) × [0,τ2) × R^d`,
//!
//! ```text
//! Φ̃(t, ω)(a1, a2, x) = (t + a1 mod τ1, t + a2 mod τ2, K^{a1,a2}(t, 0, x, ω)),
//! ```
//!
//! the measures built from it, and the averaged invariant measure `μ̄`.
//!
//! Angles are fixed-point, so advancing them is exact and the cocycle
//! identity holds bit for bit in every coordinate.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::QpCoefficients;
use crate::error::{Error, Result};
use crate::flow::{advance, DirectDriver, Workspace};
use crate::measures::{estimate_rho_tilde, rho_samples_at, rho_tilde_sample, EmpiricalMeasure, Sampler};
use crate::noise::{counter_uniform, NoisePath, TimeGrid};
use crate::time::FixedTime;
use crate::transport::{axis_energy, noise_floor_stratified, pairwise_energy, Axis, NoiseFloor, TransportMetric};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderPoint {
    pub a1: FixedTime,
    pub a2: FixedTime,
    pub x: Vec<f64>,
}

impl CylinderPoint {
    /// Reduces the angles into `[0, τ1) × [0, τ2)`.
    pub fn new(c: &QpCoefficients, a1: FixedTime, a2: FixedTime, x: Vec<f64>) -> Self {
        let (tau1, tau2) = c.periods();
        CylinderPoint {
            a1: a1.rem_period(tau1),
            a2: a2.rem_period(tau2),
            x,
        }
    }

    /// `(s mod τ1, s mod τ2, x)`.
    pub fn at_time(c: &QpCoefficients, s: FixedTime, x: Vec<f64>) -> Self {
        Self::new(c, s, s, x)
    }
}

fn circle_gap(a: FixedTime, b: FixedTime, period: FixedTime) -> f64 {
    let d = (a - b).rem_period(period);
    let e = period - d;
    if d < e {
        d.to_f64()
    } else {
        e.to_f64()
    }
}

/// `d1(a1, b1) + d2(a2, b2) + |x - y|` with the wrap-around angle metric.
pub fn cylinder_distance(c: &QpCoefficients, p: &CylinderPoint, q: &CylinderPoint) -> f64 {
    let (tau1, tau2) = c.periods();
    let dx: f64 = p.x.iter().zip(&q.x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    circle_gap(p.a1, q.a1, tau1) + circle_gap(p.a2, q.a2, tau2) + dx
}

/// `Φ̃(t_steps · dt, w)` applied to `p`.
pub fn lift_step(c: &QpCoefficients, w: &NoisePath, p: &CylinderPoint, t_steps: i64) -> Result<CylinderPoint> {
    if t_steps < 0 {
        return Err(Error::domain(format!("lift needs a nonnegative number of steps, got {t_steps}")));
    }
    if p.x.len() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            found: p.x.len(),
        });
    }
    let mut x = p.x.clone();
    let driver = DirectDriver::new(c, w, p.a1, p.a2);
    advance(c, &driver, &mut Workspace::new(c), &mut x, 0, t_steps, |_, _| {})?;
    let t = w.grid().time_of(t_steps);
    Ok(CylinderPoint::new(c, p.a1 + t, p.a2 + t, x))
}

/// Weighted atoms on the cylinder. Each atom carries a stratum label (the
/// parameter cell or time slice it was drawn for), used by noise floors.
#[derive(Clone, Debug, PartialEq)]
pub struct CylinderMeasure {
    periods: (FixedTime, FixedTime),
    dim: usize,
    a1: Vec<FixedTime>,
    a2: Vec<FixedTime>,
    x: Vec<f64>,
    weights: Vec<f64>,
    strata: Vec<u32>,
}

impl CylinderMeasure {
    fn empty(c: &QpCoefficients) -> Self {
        CylinderMeasure {
            periods: c.periods(),
            dim: c.dim(),
            a1: Vec::new(),
            a2: Vec::new(),
            x: Vec::new(),
            weights: Vec::new(),
            strata: Vec::new(),
        }
    }

    /// `δ_{a1} × δ_{a2} × μ`, scaled to total mass `mass`.
    fn push_block(&mut self, a1: FixedTime, a2: FixedTime, mu: &EmpiricalMeasure, mass: f64, stratum: u32) {
        let a1 = a1.rem_period(self.periods.0);
        let a2 = a2.rem_period(self.periods.1);
        for i in 0..mu.len() {
            self.a1.push(a1);
            self.a2.push(a2);
            self.x.extend_from_slice(mu.sample(i));
            self.weights.push(mass * mu.weights()[i]);
            self.strata.push(stratum);
        }
    }

    fn push_atom(&mut self, a1: FixedTime, a2: FixedTime, x: &[f64], weight: f64, stratum: u32) {
        self.a1.push(a1.rem_period(self.periods.0));
        self.a2.push(a2.rem_period(self.periods.1));
        self.x.extend_from_slice(x);
        self.weights.push(weight);
        self.strata.push(stratum);
    }

    /// `δ_{a1} × δ_{a2} × μ`.
    pub fn product(c: &QpCoefficients, a1: FixedTime, a2: FixedTime, mu: &EmpiricalMeasure) -> Result<Self> {
        if mu.dim() != c.dim() {
            return Err(Error::DimensionMismatch {
                expected: c.dim(),
                found: mu.dim(),
            });
        }
        let mut m = Self::empty(c);
        m.push_block(a1, a2, mu, 1.0, 0);
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn strata(&self) -> &[u32] {
        &self.strata
    }

    pub fn point(&self, i: usize) -> CylinderPoint {
        CylinderPoint {
            a1: self.a1[i],
            a2: self.a2[i],
            x: self.x[i * self.dim..(i + 1) * self.dim].to_vec(),
        }
    }

    /// Spatial marginal.
    pub fn spatial(&self) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::new(self.dim, self.x.clone(), self.weights.clone())
    }

    /// Atoms as rows `(a1, a2, x_1..x_d)` in `R^{d+2}`.
    pub fn flattened(&self) -> Result<EmpiricalMeasure> {
        let mut s = Vec::with_capacity(self.len() * (self.dim + 2));
        for i in 0..self.len() {
            s.push(self.a1[i].to_f64());
            s.push(self.a2[i].to_f64());
            s.extend_from_slice(&self.x[i * self.dim..(i + 1) * self.dim]);
        }
        EmpiricalMeasure::new(self.dim + 2, s, self.weights.clone())
    }

    /// `∫ f dμ` with `f(a1, a2, x)` and angles in time units.
    pub fn expectation(&self, f: impl Fn(f64, f64, &[f64]) -> f64) -> f64 {
        (0..self.len())
            .map(|i| {
                self.weights[i] * f(self.a1[i].to_f64(), self.a2[i].to_f64(), &self.x[i * self.dim..(i + 1) * self.dim])
            })
            .sum()
    }

    /// CSV with header `a1,a2,x_1..x_d,weight`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["a1".to_string(), "a2".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x_{i}")));
        header.push("weight".into());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(&header).map_err(io)?;
        for i in 0..self.len() {
            let mut row = vec![self.a1[i].to_f64().to_string(), self.a2[i].to_f64().to_string()];
            row.extend(self.x[i * self.dim..(i + 1) * self.dim].iter().map(|v| v.to_string()));
            row.push(self.weights[i].to_string());
            w.write_record(&row).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Energy distance on the cylinder under `cylinder_distance`. The metric is
/// a sum over the two circles and the spatial factor, so for `d = 1` the
/// energy splits into three one-dimensional energies computed in
/// `O(n log n)`; otherwise pairwise sums are used.
pub struct CylinderEnergy {
    pub tau1: f64,
    pub tau2: f64,
}

impl CylinderEnergy {
    pub fn for_coefficients(c: &QpCoefficients) -> Self {
        let (t1, t2) = c.periods();
        CylinderEnergy {
            tau1: t1.to_f64(),
            tau2: t2.to_f64(),
        }
    }

    pub fn between(&self, mu: &CylinderMeasure, nu: &CylinderMeasure) -> Result<f64> {
        self.distance(&mu.flattened()?, &nu.flattened()?)
    }

    fn point_distance(&self, p: &[f64], q: &[f64]) -> f64 {
        let dx: f64 = p[2..].iter().zip(&q[2..]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        Axis::Circle(self.tau1).distance(p[0], q[0]) + Axis::Circle(self.tau2).distance(p[1], q[1]) + dx
    }

    /// The pairwise evaluation, available in every dimension.
    pub fn pairwise(&self, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
        pairwise_energy(mu, nu, |p, q| self.point_distance(p, q))
    }
}

impl TransportMetric for CylinderEnergy {
    fn name(&self) -> &str {
        "cylinder_energy"
    }

    fn distance(&self, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
        if mu.is_empty() || nu.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if mu.dim() != nu.dim() || mu.dim() < 3 {
            return Err(Error::DimensionMismatch {
                expected: mu.dim().max(3),
                found: nu.dim(),
            });
        }
        if mu.dim() != 3 {
            return Ok(self.pairwise(mu, nu));
        }
        let axes = [Axis::Circle(self.tau1), Axis::Circle(self.tau2), Axis::Line];
        Ok(axes
            .iter()
            .enumerate()
            .map(|(j, &axis)| axis_energy(&mu.component(j), mu.weights(), &nu.component(j), nu.weights(), axis))
            .sum())
    }
}

fn node(period: FixedTime, i: usize, n: usize) -> FixedTime {
    FixedTime::from_raw(period.raw() * i as i128 / n as i128)
}

/// `μ̄` discretised on the `n1 × n2` parameter grid: the equal-weight
/// mixture of `δ_{s1} × δ_{s2} × ρ̃_{s1,s2}` over the grid nodes. Cell `k`
/// (row-major) uses seeds `seed0 + k n_samples ..`.
pub fn mu_bar_grid(sampler: &Sampler<'_>, n1: usize, n2: usize, n_samples: usize, seed0: u64) -> Result<CylinderMeasure> {
    if n1 == 0 || n2 == 0 || n_samples == 0 {
        return Err(Error::domain("grid sizes and sample count must be positive"));
    }
    let c = sampler.coefficients;
    let (tau1, tau2) = c.periods();
    let mut m = CylinderMeasure::empty(c);
    let cells = (n1 * n2) as f64;
    for i in 0..n1 {
        for j in 0..n2 {
            let k = i * n2 + j;
            let (s1, s2) = (node(tau1, i, n1), node(tau2, j, n2));
            let rho = estimate_rho_tilde(sampler, s1, s2, n_samples, seed0 + (k * n_samples) as u64)?;
            m.push_block(s1, s2, &rho, 1.0 / cells, k as u32);
        }
    }
    Ok(m)
}

/// Index reserved for the parameter jitter draws of [`mu_bar_grid_stratified`].
const JITTER_INDEX: i64 = i64::MIN;

/// `μ̄` by stratified sampling over the `n1 × n2` parameter cells: sample
/// `i` of cell `k` (row-major) draws its parameters uniformly inside the
/// cell and pulls back on the noise with seed `seed0 + k n_samples + i`.
/// Unlike [`mu_bar_grid`] the angle marginals are continuous, so the
/// measure can be compared with other estimates of `μ̄` on the cylinder.
pub fn mu_bar_grid_stratified(sampler: &Sampler<'_>, n1: usize, n2: usize, n_samples: usize, seed0: u64) -> Result<CylinderMeasure> {
    if n1 == 0 || n2 == 0 || n_samples == 0 {
        return Err(Error::domain("grid sizes and sample count must be positive"));
    }
    let c = sampler.coefficients;
    let (tau1, tau2) = c.periods();
    let cells = n1 * n2;
    let atoms: Vec<Result<(FixedTime, FixedTime, u64, bool, Vec<f64>)>> = (0..cells * n_samples)
        .into_par_iter()
        .map(|m| {
            let k = m / n_samples;
            let seed = seed0 + m as u64;
            let s1 = node(tau1, k / n2, n1) + FixedTime::from_f64(counter_uniform(seed, JITTER_INDEX, 0) * tau1.to_f64() / n1 as f64);
            let s2 = node(tau2, k % n2, n2) + FixedTime::from_f64(counter_uniform(seed, JITTER_INDEX, 1) * tau2.to_f64() / n2 as f64);
            let (converged, x) = rho_tilde_sample(sampler, s1, s2, seed)?;
            Ok((s1, s2, seed, converged, x))
        })
        .collect();
    let weight = 1.0 / (cells * n_samples) as f64;
    let mut m = CylinderMeasure::empty(c);
    let mut failed = Vec::new();
    for (i, a) in atoms.into_iter().enumerate() {
        let (s1, s2, seed, converged, x) = a?;
        if !converged {
            failed.push(seed);
        }
        m.push_atom(s1, s2, &x, weight, (i / n_samples) as u32);
    }
    if !failed.is_empty() {
        return Err(Error::NotConverged { seeds: failed });
    }
    Ok(m)
}

/// Grid times of the `n_slices` slice midpoints of `[0, T]`.
pub fn slice_indices(grid: &TimeGrid, horizon: f64, n_slices: usize) -> Vec<i64> {
    (0..n_slices)
        .map(|j| grid.index_of((j as f64 + 0.5) * horizon / n_slices as f64))
        .collect()
}

/// `μ̄_T = (1/T) ∫_0^T μ̃_s ds` discretised at slice midpoints `s_j`, with
/// `μ̃_s = δ_{s mod τ1} × δ_{s mod τ2} × ρ_s`.
pub fn mu_bar_time_average(
    sampler: &Sampler<'_>,
    horizon: f64,
    n_slices: usize,
    n_samples: usize,
    seed0: u64,
) -> Result<CylinderMeasure> {
    if !(horizon > 0.0) || n_slices == 0 || n_samples == 0 {
        return Err(Error::domain("time average needs T > 0 and positive counts"));
    }
    let c = sampler.coefficients;
    let indices = slice_indices(&sampler.grid, horizon, n_slices);
    let samples = rho_samples_at(sampler, &indices, n_samples, seed0)?;
    let d = c.dim();
    let weight = 1.0 / (n_slices * n_samples) as f64;
    let mut m = CylinderMeasure::empty(c);
    for (row, x) in samples.chunks(d).enumerate() {
        let j = row / n_samples;
        let s = sampler.grid.time_of(indices[j]);
        m.push_atom(s, s, x, weight, j as u32);
    }
    Ok(m)
}

/// `P̃*_t μ`: every atom moved by `lift_step` on its own fresh noise (seed
/// `seed0 + i`).
pub fn lift_measure(c: &QpCoefficients, grid: TimeGrid, mu: &CylinderMeasure, t_steps: i64, seed0: u64) -> Result<CylinderMeasure> {
    let moved: Vec<Result<CylinderPoint>> = (0..mu.len())
        .into_par_iter()
        .map(|i| {
            let w = NoisePath::new(seed0 + i as u64, c.dim(), grid.dt())?;
            lift_step(c, &w, &mu.point(i), t_steps)
        })
        .collect();
    let mut out = CylinderMeasure {
        a1: Vec::with_capacity(mu.len()),
        a2: Vec::with_capacity(mu.len()),
        x: Vec::with_capacity(mu.x.len()),
        weights: mu.weights.clone(),
        strata: mu.strata.clone(),
        ..CylinderMeasure::empty(c)
    };
    for p in moved {
        let p = p?;
        out.a1.push(p.a1);
        out.a2.push(p.a2);
        out.x.extend(p.x);
    }
    Ok(out)
}

/// Stratified noise floor between two independent builds of one measure.
pub fn cylinder_noise_floor(
    c: &QpCoefficients,
    a: &CylinderMeasure,
    b: &CylinderMeasure,
    n_relabel: usize,
    seed: u64,
) -> Result<NoiseFloor> {
    noise_floor_stratified(
        &CylinderEnergy::for_coefficients(c),
        &a.flattened()?,
        &b.flattened()?,
        Some((a.strata(), b.strata())),
        n_relabel,
        seed,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub t: f64,
    pub dist: f64,
    pub noise_floor: f64,
    pub passed: bool,
}

/// Compares `P̃*_t μ` with `μ`. `rebuild` is an independent estimate of the
/// same measure as `mu`; the pass rule is `dist ≤ 2 · noise_floor`.
pub fn invariance_check(
    c: &QpCoefficients,
    grid: TimeGrid,
    mu: &CylinderMeasure,
    rebuild: &CylinderMeasure,
    t_steps: i64,
    seed0: u64,
) -> Result<InvarianceReport> {
    let moved = lift_measure(c, grid, mu, t_steps, seed0)?;
    let dist = CylinderEnergy::for_coefficients(c).between(&moved, mu)?;
    let floor = cylinder_noise_floor(c, mu, rebuild, 40, seed0 ^ 0xF1004)?;
    Ok(InvarianceReport {
        t: grid.time_f64(t_steps),
        dist,
        noise_floor: floor.mean,
        passed: dist <= 2.0 * floor.mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BirkhoffAverage {
    pub value: f64,
    /// Batch-means standard error.
    pub stderr: f64,
    pub n_steps: usize,
    pub n_batches: usize,
}

pub const BIRKHOFF_BATCHES: usize = 20;

/// `(1/T) Σ f(Φ̃(k dt, w) p0) dt` over `k = 0 .. T/dt - 1`, i.e. the left
/// Riemann sum of the time average along one lifted trajectory. `f` receives
/// the angles in time units and the spatial state.
pub fn birkhoff_average(
    c: &QpCoefficients,
    w: &NoisePath,
    p0: &CylinderPoint,
    f: impl Fn(f64, f64, &[f64]) -> f64,
    horizon: f64,
) -> Result<BirkhoffAverage> {
    let grid = w.grid();
    let n = grid.index_of(horizon);
    if !(horizon > 0.0) || n < BIRKHOFF_BATCHES as i64 {
        return Err(Error::domain(format!("horizon {horizon} is too short")));
    }
    let (tau1, tau2) = c.periods();
    let n = n as usize;
    let mut values = Vec::with_capacity(n);
    let angle = |a: FixedTime, k: i64, tau: FixedTime| (a + grid.time_of(k)).rem_period(tau).to_f64();
    values.push(f(p0.a1.to_f64(), p0.a2.to_f64(), &p0.x));
    let mut x = p0.x.clone();
    let driver = DirectDriver::new(c, w, p0.a1, p0.a2);
    advance(c, &driver, &mut Workspace::new(c), &mut x, 0, n as i64 - 1, |k, state| {
        values.push(f(angle(p0.a1, k, tau1), angle(p0.a2, k, tau2), state));
    })?;
    let value = values.iter().sum::<f64>() / n as f64;
    let per = n / BIRKHOFF_BATCHES;
    let means: Vec<f64> = (0..BIRKHOFF_BATCHES)
        .map(|b| values[b * per..(b + 1) * per].iter().sum::<f64>() / per as f64)
        .collect();
    let mb = means.iter().sum::<f64>() / BIRKHOFF_BATCHES as f64;
    let var = means.iter().map(|m| (m - mb) * (m - mb)).sum::<f64>() / (BIRKHOFF_BATCHES - 1) as f64;
    Ok(BirkhoffAverage {
        value,
        stderr: (var / BIRKHOFF_BATCHES as f64).sqrt(),
        n_steps: n,
        n_batches: BIRKHOFF_BATCHES,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientSpec;
    use crate::pullback::{pullback_phi, PullbackConfig};

    fn ou() -> QpCoefficients {
        CoefficientSpec::default_ou().build().unwrap()
    }

    fn pt(c: &QpCoefficients, a1: f64, a2: f64, x: f64) -> CylinderPoint {
        CylinderPoint::new(c, FixedTime::from_f64(a1), FixedTime::from_f64(a2), vec![x])
    }

    #[test]
    fn distance_examples() {
        let c = ou();
        let p = pt(&c, 0.01, 0.3, 1.0);
        assert_eq!(cylinder_distance(&c, &p, &p), 0.0);
        let q = pt(&c, 0.99, 0.3, 1.0);
        assert!((cylinder_distance(&c, &p, &q) - 0.02).abs() < 1e-15);
        let r = pt(&c, 0.01, 0.3, 4.0);
        assert_eq!(cylinder_distance(&c, &p, &r), 3.0);
    }

    #[test]
    fn zero_step_lift_is_identity() {
        let c = ou();
        let w = NoisePath::new(1, 1, 1e-3).unwrap();
        let p = pt(&c, 0.4, 1.3, -0.2);
        assert_eq!(lift_step(&c, &w, &p, 0).unwrap(), p);
    }

    #[test]
    fn cocycle_identity_is_bitwise() {
        let c = ou();
        let w = NoisePath::new(2, 1, 1e-3).unwrap();
        let p = pt(&c, 0.77, 1.2, 0.5);
        for &(m, n) in &[(1, 1), (250, 731), (1999, 3)] {
            let two = lift_step(&c, &w.shift(m), &lift_step(&c, &w, &p, m).unwrap(), n).unwrap();
            let one = lift_step(&c, &w, &p, m + n).unwrap();
            assert_eq!(two, one);
        }
    }

    #[test]
    fn lifted_random_path_is_invariant() {
        let c = ou();
        let w = NoisePath::new(3, 1, 1e-3).unwrap();
        let cfg = PullbackConfig::for_coefficients(&c, &w.grid()).unwrap();
        let (s, t) = (700, 1300);
        let phi_s = pullback_phi(&c, &w, s, &[0.0], &cfg).unwrap().value;
        let phi_st = pullback_phi(&c, &w, s + t, &[0.0], &cfg).unwrap().value;
        let grid = w.grid();
        let start = CylinderPoint::at_time(&c, grid.time_of(s), phi_s);
        let end = lift_step(&c, &w.shift(s), &start, t).unwrap();
        let expect = CylinderPoint::at_time(&c, grid.time_of(s + t), phi_st);
        assert_eq!((end.a1, end.a2), (expect.a1, expect.a2));
        assert!(cylinder_distance(&c, &end, &expect) < 5e-6);
    }

    #[test]
    fn fast_cylinder_energy_matches_pairwise() {
        let c = ou();
        let sampler = Sampler::new(&c, 1e-2).unwrap();
        let a = mu_bar_grid(&sampler, 3, 2, 20, 0).unwrap().flattened().unwrap();
        let b = mu_bar_time_average(&sampler, 7.0, 9, 10, 500).unwrap().flattened().unwrap();
        let metric = CylinderEnergy::for_coefficients(&c);
        let fast = metric.distance(&a, &b).unwrap();
        assert!((fast - metric.pairwise(&a, &b)).abs() < 1e-12);
        assert_eq!(metric.distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn single_cell_grid_is_a_product_measure() {
        let c = ou();
        let sampler = Sampler::new(&c, 1e-2).unwrap();
        let m = mu_bar_grid(&sampler, 1, 1, 10, 4).unwrap();
        let rho = estimate_rho_tilde(&sampler, 0.0, 0.0, 10, 4).unwrap();
        let direct = CylinderMeasure::product(&c, FixedTime::ZERO, FixedTime::ZERO, &rho).unwrap();
        assert_eq!(m, direct);
    }

    #[test]
    fn single_slice_average_is_the_lifted_entrance_measure() {
        let c = ou();
        let sampler = Sampler::new(&c, 1e-2).unwrap();
        let m = mu_bar_time_average(&sampler, 0.5, 1, 10, 9).unwrap();
        let k = slice_indices(&sampler.grid, 0.5, 1)[0];
        let s = sampler.grid.time_of(k);
        let xs: Vec<f64> = (9..19)
            .map(|seed| {
                let w = NoisePath::new(seed, 1, 1e-2).unwrap();
                crate::pullback::pullback_phi(&c, &w, k, &[0.0], &sampler.pullback).unwrap().value[0]
            })
            .collect();
        let rho = EmpiricalMeasure::uniform(1, xs).unwrap();
        assert_eq!(m, CylinderMeasure::product(&c, s, s, &rho).unwrap());
    }

    #[test]
    fn deterministic_equilibrium_stays_at_zero() {
        let c = CoefficientSpec::scalar_ou(1.0, 0.0, vec![], 1.0, 2f64.sqrt()).build().unwrap();
        let cfg = PullbackConfig::with_rate(1.0, &TimeGrid::new(1e-2).unwrap(), 2.0).unwrap();
        let sampler = Sampler::new(&c, 1e-2).unwrap().with_config(cfg);
        for horizon in [1.0, 5.0] {
            let m = mu_bar_time_average(&sampler, horizon, 4, 3, 0).unwrap();
            assert!(m.spatial().unwrap().samples().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn slice_angles_equidistribute() {
        let c = ou();
        let grid = TimeGrid::new(1e-3).unwrap();
        let n = 2000;
        let (_, tau2) = c.periods();
        let mut u: Vec<f64> = slice_indices(&grid, 200.0, n)
            .into_iter()
            .map(|k| grid.time_of(k).turns(tau2))
            .collect();
        u.sort_by(f64::total_cmp);
        let ks = u
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n as f64).abs().max((x - (i + 1) as f64 / n as f64).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 1.36 / (n as f64).sqrt(), "{ks}");
    }

    #[test]
    fn fixed_angle_measure_is_not_invariant() {
        let c = ou();
        let sampler = Sampler::new(&c, 1e-3).unwrap();
        let mu = mu_bar_grid(&sampler, 1, 1, 300, 0).unwrap();
        let again = mu_bar_grid(&sampler, 1, 1, 300, 10_000).unwrap();
        let r = invariance_check(&c, sampler.grid, &mu, &again, 370, 50_000).unwrap();
        assert!(!r.passed && r.dist > 20.0 * r.noise_floor, "{r:?}");
        let r0 = invariance_check(&c, sampler.grid, &mu, &again, 0, 50_000).unwrap();
        assert!(r0.passed && r0.dist == 0.0);
    }

    #[test]
    fn stratified_grid_angles_are_uniform() {
        let c = ou();
        let sampler = Sampler::new(&c, 1e-2).unwrap();
        let (n1, n2, n) = (4, 3, 50);
        let m = mu_bar_grid_stratified(&sampler, n1, n2, n, 0).unwrap();
        let (tau1, tau2) = c.periods();
        for (angles, tau) in [(&m.a1, tau1), (&m.a2, tau2)] {
            let mut u: Vec<f64> = angles.iter().map(|a| a.turns(tau)).collect();
            u.sort_by(f64::total_cmp);
            let len = u.len() as f64;
            let ks = u
                .iter()
                .enumerate()
                .map(|(i, &x)| (x - i as f64 / len).abs().max((x - (i + 1) as f64 / len).abs()))
                .fold(0.0, f64::max);
            assert!(ks < 1.36 / len.sqrt(), "{ks}");
        }
        // every atom sits in its own cell
        for i in 0..m.len() {
            let k = m.strata()[i] as usize;
            assert_eq!((m.a1[i].turns(tau1) * n1 as f64) as usize, k / n2);
            assert_eq!((m.a2[i].turns(tau2) * n2 as f64) as usize, k % n2);
        }
        assert_eq!(m, mu_bar_grid_stratified(&sampler, n1, n2, n, 0).unwrap());
    }

    #[test]
    fn stratified_sample_matches_direct_pullback() {
        let c = ou();
        let sampler = Sampler::new(&c, 1e-2).unwrap();
        let m = mu_bar_grid_stratified(&sampler, 2, 2, 3, 40).unwrap();
        let p = m.point(7);
        let w = NoisePath::new(47, 1, 1e-2).unwrap();
        let direct = crate::pullback::pullback_phi_tilde(&c, &w, p.a1, p.a2, &[0.0], &sampler.pullback).unwrap();
        assert_eq!(p.x, direct.value);
    }

    #[test]
    fn birkhoff_of_constant_is_one() {
        let c = ou();
        let w = NoisePath::new(5, 1, 1e-2).unwrap();
        let b = birkhoff_average(&c, &w, &pt(&c, 0.0, 0.0, 0.0), |_, _, _| 1.0, 10.0).unwrap();
        assert_eq!(b.value, 1.0);
        assert_eq!(b.stderr, 0.0);
    }

    #[test]
    fn csv_has_angle_columns() {
        let c = ou();
        let mu = EmpiricalMeasure::uniform(1, vec![0.5]).unwrap();
        let m = CylinderMeasure::product(&c, FixedTime::from_f64(0.25), FixedTime::from_f64(1.5), &mu).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("a1,a2,x_1,weight"));
        let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row[0], 0.25);
        assert!((row[1] - (1.5 - 2f64.sqrt())).abs() < 1e-15);
    }
}
