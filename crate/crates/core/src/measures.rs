//! Empirical versions of the entrance measure `ρ_t = L(φ(t))`, the hull
//! measure `ρ̃_{t,s} = L(φ̃(t,s))` and the push-forward `P*(t,s) μ`.
//!
//! Sample `i` always uses the noise path with seed `seed0 + i`, and results
//! are collected in seed order, so every estimate is reproducible and
//! independent of the thread count.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::QpCoefficients;
use crate::error::{Error, Result};
use crate::flow::{advance, Workspace};
use crate::noise::{NoisePath, TimeGrid};
use crate::pullback::{forcing_table, pullback_with_table, ForcingTable, PullbackConfig, TabulatedDriver};
use crate::time::FixedTime;

/// Number of pull-back levels tabulated up front; deeper levels evaluate the
/// coefficients on demand.
const TABLE_LEVELS: usize = 12;
/// Levels tabulated for a one-off sample; deeper levels evaluate directly.
const SINGLE_TABLE_LEVELS: usize = 8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasureMeta {
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub t_param: Option<f64>,
    #[serde(default)]
    pub s_param: Option<f64>,
    /// First and last seed used, inclusive.
    #[serde(default)]
    pub seed_range: Option<(u64, u64)>,
}

/// Weighted point cloud in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    samples: Vec<f64>,
    weights: Vec<f64>,
    pub meta: MeasureMeta,
}

/// The JSON sidecar written next to a measure CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureSidecar {
    pub dim: usize,
    pub n_samples: usize,
    #[serde(flatten)]
    pub meta: MeasureMeta,
}

impl EmpiricalMeasure {
    /// `samples` is row-major with `dim` entries per atom.
    pub fn new(dim: usize, samples: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("measure dimension must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if samples.len() % dim != 0 || samples.len() / dim != weights.len() {
            return Err(Error::domain(format!(
                "{} coordinates and {} weights do not form {}-dimensional atoms",
                samples.len(),
                weights.len(),
                dim
            )));
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("non-finite sample"));
        }
        if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(Error::domain("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        // Summation rounding grows with the number of atoms.
        if (total - 1.0).abs() > 1e-12 + 4.0 * f64::EPSILON * weights.len() as f64 {
            return Err(Error::domain(format!("weights sum to {total}, not 1")));
        }
        Ok(EmpiricalMeasure {
            dim,
            samples,
            weights,
            meta: MeasureMeta::default(),
        })
    }

    pub fn uniform(dim: usize, samples: Vec<f64>) -> Result<Self> {
        let n = if dim == 0 { 0 } else { samples.len() / dim };
        Self::new(dim, samples, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn with_meta(mut self, meta: MeasureMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    /// Coordinate `j` of every atom.
    pub fn component(&self, j: usize) -> Vec<f64> {
        self.samples.chunks(self.dim).map(|x| x[j]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (x, w) in self.samples.chunks(self.dim).zip(&self.weights) {
            m.iter_mut().zip(x).for_each(|(a, b)| *a += w * b);
        }
        m
    }

    /// Weighted covariance, row-major `d×d`, with the unbiased correction for
    /// equal weights.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let m = self.mean();
        let mut c = vec![0.0; d * d];
        for (x, w) in self.samples.chunks(d).zip(&self.weights) {
            for i in 0..d {
                for j in 0..d {
                    c[i * d + j] += w * (x[i] - m[i]) * (x[j] - m[j]);
                }
            }
        }
        let sum_sq: f64 = self.weights.iter().map(|w| w * w).sum();
        if sum_sq < 1.0 {
            c.iter_mut().for_each(|v| *v /= 1.0 - sum_sq);
        }
        c
    }

    /// `∫ |x|^2 dμ`.
    pub fn second_moment(&self) -> f64 {
        self.samples
            .chunks(self.dim)
            .zip(&self.weights)
            .map(|(x, w)| w * x.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// `∫ f dμ`.
    pub fn expectation(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.samples.chunks(self.dim).zip(&self.weights).map(|(x, w)| w * f(x)).sum()
    }

    /// Atoms of both measures, equally weighted.
    pub fn concat(&self, other: &EmpiricalMeasure) -> Result<EmpiricalMeasure> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        let mut s = self.samples.clone();
        s.extend_from_slice(&other.samples);
        EmpiricalMeasure::uniform(self.dim, s)
    }

    /// The atoms at `idx`, equally weighted.
    pub fn select_uniform(&self, idx: &[usize]) -> EmpiricalMeasure {
        let mut s = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            s.extend_from_slice(self.sample(i));
        }
        let n = idx.len();
        EmpiricalMeasure {
            dim: self.dim,
            samples: s,
            weights: vec![1.0 / n as f64; n],
            meta: MeasureMeta::default(),
        }
    }

    /// Uniform mixture of measures of equal dimension, each component
    /// carrying total mass `1/k`.
    pub fn mixture(parts: &[EmpiricalMeasure]) -> Result<EmpiricalMeasure> {
        let first = parts.first().ok_or(Error::EmptyMeasure)?;
        let k = parts.len() as f64;
        let mut samples = Vec::new();
        let mut weights = Vec::new();
        for p in parts {
            if p.dim != first.dim {
                return Err(Error::DimensionMismatch {
                    expected: first.dim,
                    found: p.dim,
                });
            }
            samples.extend_from_slice(&p.samples);
            weights.extend(p.weights.iter().map(|w| w / k));
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        EmpiricalMeasure::new(first.dim, samples, weights)
    }

    /// CSV with header `x_1,..,x_d,weight`, one atom per row. Values use the
    /// shortest representation that reads back to the same bits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x_{i}")).collect();
        header.push("weight".into());
        w.write_record(&header).map_err(csv_io)?;
        for (x, wt) in self.samples.chunks(self.dim).zip(&self.weights) {
            let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            row.push(wt.to_string());
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, source_name: &str) -> Result<EmpiricalMeasure> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers().map_err(|e| csv_parse(source_name, 1, e))?.clone();
        if header.len() < 2 || &header[header.len() - 1] != "weight" {
            return Err(Error::Parse {
                source_name: source_name.into(),
                line: 1,
                message: "expected header x_1,..,x_d,weight".into(),
            });
        }
        let dim = header.len() - 1;
        let mut samples = Vec::new();
        let mut weights = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                csv_parse(source_name, line, e)
            })?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    source_name: source_name.into(),
                    line,
                    message: format!("column {} is not a number: `{field}`", j + 1),
                })?;
                if j < dim {
                    samples.push(v);
                } else {
                    weights.push(v);
                }
            }
        }
        EmpiricalMeasure::new(dim, samples, weights)
    }

    pub fn sidecar(&self) -> MeasureSidecar {
        MeasureSidecar {
            dim: self.dim,
            n_samples: self.len(),
            meta: self.meta.clone(),
        }
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        let f = std::fs::File::create(dir.join(format!("{stem}.csv")))?;
        self.write_csv(std::io::BufWriter::new(f))?;
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path, stem: &str) -> Result<EmpiricalMeasure> {
        let path = dir.join(format!("{stem}.csv"));
        let f = std::fs::File::open(&path)?;
        let mut mu = Self::read_csv(std::io::BufReader::new(f), &path.display().to_string())?;
        let side = dir.join(format!("{stem}.json"));
        if side.exists() {
            let meta: MeasureSidecar = serde_json::from_str(&std::fs::read_to_string(side)?)?;
            if meta.dim != mu.dim || meta.n_samples != mu.len() {
                return Err(Error::domain(format!(
                    "sidecar describes {} atoms in dimension {}, csv has {} in dimension {}",
                    meta.n_samples,
                    meta.dim,
                    mu.len(),
                    mu.dim
                )));
            }
            mu.meta = meta.meta;
        }
        Ok(mu)
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn csv_parse(source_name: &str, line: usize, e: csv::Error) -> Error {
    Error::Parse {
        source_name: source_name.into(),
        line,
        message: e.to_string(),
    }
}

/// Shared inputs for drawing many pull-back samples.
#[derive(Clone, Copy, Debug)]
pub struct Sampler<'a> {
    pub coefficients: &'a QpCoefficients,
    pub grid: TimeGrid,
    pub pullback: PullbackConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(c: &'a QpCoefficients, dt: f64) -> Result<Self> {
        let grid = TimeGrid::new(dt)?;
        Ok(Sampler {
            coefficients: c,
            grid,
            pullback: PullbackConfig::for_coefficients(c, &grid)?,
        })
    }

    pub fn with_config(mut self, cfg: PullbackConfig) -> Self {
        self.pullback = cfg;
        self
    }

    fn noise(&self, seed: u64) -> NoisePath {
        NoisePath::new(seed, self.coefficients.dim(), self.grid.dt()).expect("grid already validated")
    }

    fn meta(&self, label: &str, t: Option<f64>, s: Option<f64>, n: usize, seed0: u64) -> MeasureMeta {
        MeasureMeta {
            label: label.into(),
            t_param: t,
            s_param: s,
            seed_range: Some((seed0, seed0 + n as u64 - 1)),
        }
    }
}

fn collect_pullbacks(results: Vec<Result<(u64, bool, Vec<f64>)>>, dim: usize) -> Result<Vec<f64>> {
    let mut failed = Vec::new();
    let mut samples = Vec::with_capacity(results.len() * dim);
    for r in results {
        let (seed, converged, value) = r?;
        if !converged {
            failed.push(seed);
        }
        samples.extend(value);
    }
    if !failed.is_empty() {
        return Err(Error::NotConverged { seeds: failed });
    }
    Ok(samples)
}

/// Samples of `φ̃(t, s)`: pull-backs of `K^{t,s}` to time 0.
pub fn estimate_rho_tilde(
    sampler: &Sampler<'_>,
    t_param: impl Into<FixedTime>,
    s_param: impl Into<FixedTime>,
    n: usize,
    seed0: u64,
) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return Err(Error::EmptyMeasure);
    }
    let c = sampler.coefficients;
    let (r1, r2) = (t_param.into(), s_param.into());
    let table = forcing_table(c, sampler.grid, r1, r2, 0, &sampler.pullback, TABLE_LEVELS);
    let x0 = vec![0.0; c.dim()];
    let results: Vec<_> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let w = sampler.noise(seed0 + i);
            let r = pullback_with_table(&table, &w, 0, &x0, &sampler.pullback)?;
            Ok((seed0 + i, r.converged, r.value))
        })
        .collect();
    let samples = collect_pullbacks(results, c.dim())?;
    Ok(EmpiricalMeasure::uniform(c.dim(), samples)?.with_meta(sampler.meta(
        "rho_tilde",
        Some(r1.to_f64()),
        Some(r2.to_f64()),
        n,
        seed0,
    )))
}

/// One sample of `φ̃(r1, r2)` on the noise with seed `seed`, with its own
/// forcing table. For parameters that change from sample to sample.
pub fn rho_tilde_sample(sampler: &Sampler<'_>, r1: FixedTime, r2: FixedTime, seed: u64) -> Result<(bool, Vec<f64>)> {
    let c = sampler.coefficients;
    let table = forcing_table(c, sampler.grid, r1, r2, 0, &sampler.pullback, SINGLE_TABLE_LEVELS);
    let r = pullback_with_table(&table, &sampler.noise(seed), 0, &vec![0.0; c.dim()], &sampler.pullback)?;
    Ok((r.converged, r.value))
}

/// Samples of `φ(t_k)` for every grid index in `indices`, `n_per` each,
/// sharing one forcing table. Sample `i` at `indices[j]` uses seed
/// `seed0 + j n_per + i`; the output is ordered the same way.
pub fn rho_samples_at(sampler: &Sampler<'_>, indices: &[i64], n_per: usize, seed0: u64) -> Result<Vec<f64>> {
    let (Some(&first), Some(&last)) = (indices.iter().min(), indices.iter().max()) else {
        return Err(Error::EmptyMeasure);
    };
    if n_per == 0 {
        return Err(Error::EmptyMeasure);
    }
    let c = sampler.coefficients;
    let cfg = &sampler.pullback;
    let table = ForcingTable::new(
        c,
        sampler.grid,
        FixedTime::ZERO,
        FixedTime::ZERO,
        first - TABLE_LEVELS as i64 * cfg.level_steps,
        last,
    );
    let x0 = vec![0.0; c.dim()];
    let results: Vec<_> = (0..indices.len() * n_per)
        .into_par_iter()
        .map(|m| {
            let seed = seed0 + m as u64;
            let r = pullback_with_table(&table, &sampler.noise(seed), indices[m / n_per], &x0, cfg)?;
            Ok((seed, r.converged, r.value))
        })
        .collect();
    collect_pullbacks(results, c.dim())
}

/// Samples of `φ(t)` via the diagonal `φ(t) = φ̃(t, t)` on shifted noise.
pub fn estimate_rho(sampler: &Sampler<'_>, t_param: impl Into<FixedTime>, n: usize, seed0: u64) -> Result<EmpiricalMeasure> {
    let t_param = t_param.into();
    let mut mu = estimate_rho_tilde(sampler, t_param, t_param, n, seed0)?;
    mu.meta.label = "rho".into();
    mu.meta.s_param = None;
    Ok(mu)
}

/// Joint samples of `ρ_t` at several grid times from one pull-back each:
/// path `i` is pulled back to `t0_idx` and then carried forward on the same
/// noise, which by the random-path property yields `φ(t)` at every later
/// time. Each returned measure has the exact marginal law `ρ_t`; measures at
/// different times are correlated.
pub fn estimate_rho_path(sampler: &Sampler<'_>, t0_idx: i64, indices: &[i64], n: usize, seed0: u64) -> Result<Vec<EmpiricalMeasure>> {
    if n == 0 {
        return Err(Error::EmptyMeasure);
    }
    if indices.iter().any(|&k| k < t0_idx) || indices.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::domain("path indices must be sorted and not precede the pull-back time"));
    }
    let c = sampler.coefficients;
    let d = c.dim();
    let last = indices.last().copied().unwrap_or(t0_idx);
    let cfg = &sampler.pullback;
    let lo = t0_idx - TABLE_LEVELS as i64 * cfg.level_steps;
    let table = ForcingTable::new(c, sampler.grid, FixedTime::ZERO, FixedTime::ZERO, lo, last);
    let x0 = vec![0.0; d];
    let results: Vec<Result<(u64, bool, Vec<f64>)>> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let w = sampler.noise(seed0 + i);
            let r = pullback_with_table(&table, &w, t0_idx, &x0, cfg)?;
            let mut x = r.value.clone();
            let mut out = Vec::with_capacity(indices.len() * d);
            let mut next = 0;
            while next < indices.len() && indices[next] == t0_idx {
                out.extend_from_slice(&x);
                next += 1;
            }
            let driver = TabulatedDriver {
                table: &table,
                noise: &w,
            };
            let mut ws = Workspace::new(c);
            advance(c, &driver, &mut ws, &mut x, t0_idx, last, |k, state| {
                while next < indices.len() && indices[next] == k {
                    out.extend_from_slice(state);
                    next += 1;
                }
            })?;
            Ok((seed0 + i, r.converged, out))
        })
        .collect();
    let flat = collect_pullbacks(results, d * indices.len())?;
    let stride = d * indices.len();
    indices
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let s: Vec<f64> = flat.chunks(stride).flat_map(|row| row[j * d..(j + 1) * d].to_vec()).collect();
            let t = sampler.grid.time_f64(k);
            Ok(EmpiricalMeasure::uniform(d, s)?.with_meta(sampler.meta("rho", Some(t), None, n, seed0)))
        })
        .collect()
}

/// `P*(t, s) μ`: atom `i` moves along `u` from `s_idx` to `t_idx` on the
/// fresh noise with seed `seed0 + i`; weights are carried along.
pub fn pushforward(
    c: &QpCoefficients,
    grid: TimeGrid,
    mu: &EmpiricalMeasure,
    s_idx: i64,
    t_idx: i64,
    seed0: u64,
) -> Result<EmpiricalMeasure> {
    if mu.dim() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            found: mu.dim(),
        });
    }
    if t_idx < s_idx {
        return Err(Error::domain(format!("end index {t_idx} precedes start index {s_idx}")));
    }
    if t_idx == s_idx {
        return Ok(mu.clone());
    }
    let table = ForcingTable::new(c, grid, FixedTime::ZERO, FixedTime::ZERO, s_idx, t_idx);
    let moved: Vec<Result<Vec<f64>>> = (0..mu.len())
        .into_par_iter()
        .map(|i| {
            let w = NoisePath::new(seed0 + i as u64, c.dim(), grid.dt())?;
            let driver = TabulatedDriver {
                table: &table,
                noise: &w,
            };
            let mut ws = Workspace::new(c);
            let mut x = mu.sample(i).to_vec();
            advance(c, &driver, &mut ws, &mut x, s_idx, t_idx, |_, _| {})?;
            Ok(x)
        })
        .collect();
    let mut samples = Vec::with_capacity(mu.samples().len());
    for m in moved {
        samples.extend(m?);
    }
    let meta = MeasureMeta {
        label: "pushforward".into(),
        t_param: Some(grid.time_f64(t_idx)),
        s_param: Some(grid.time_f64(s_idx)),
        seed_range: Some((seed0, seed0 + mu.len() as u64 - 1)),
    };
    Ok(EmpiricalMeasure::new(c.dim(), samples, mu.weights().to_vec())?.with_meta(meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientSpec;

    fn ou() -> QpCoefficients {
        CoefficientSpec::default_ou().build().unwrap()
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(matches!(EmpiricalMeasure::uniform(1, vec![]), Err(Error::EmptyMeasure)));
        assert!(EmpiricalMeasure::new(1, vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![f64::NAN], vec![1.0]).is_err());
        assert!(EmpiricalMeasure::new(2, vec![1.0, 2.0, 3.0], vec![1.0]).is_err());
    }

    #[test]
    fn moments_of_a_small_cloud() {
        let mu = EmpiricalMeasure::new(1, vec![1.0, 3.0], vec![0.25, 0.75]).unwrap();
        assert_eq!(mu.mean(), vec![2.5]);
        assert_eq!(mu.second_moment(), 0.25 + 0.75 * 9.0);
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let mu = EmpiricalMeasure::uniform(2, vec![0.1, -1.0 / 3.0, 2e-17, 5.5, 7.0, 1e300])
            .unwrap()
            .with_meta(MeasureMeta {
                label: "x".into(),
                t_param: Some(0.25),
                s_param: None,
                seed_range: Some((4, 6)),
            });
        let dir = tempfile::tempdir().unwrap();
        mu.save(dir.path(), "m").unwrap();
        let back = EmpiricalMeasure::load(dir.path(), "m").unwrap();
        assert_eq!(back, mu);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "x_1,weight\n0.5,0.5\nabc,0.5\n";
        let err = EmpiricalMeasure::read_csv(text.as_bytes(), "m.csv").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn deterministic_spec_gives_a_point_mass() {
        let c = CoefficientSpec::scalar_ou(1.0, 0.0, vec![], 1.0, 2f64.sqrt()).build().unwrap();
        let cfg = PullbackConfig::with_rate(1.0, &TimeGrid::new(1e-2).unwrap(), 2.0).unwrap();
        let s = Sampler::new(&c, 1e-2).unwrap().with_config(cfg);
        let mu = estimate_rho(&s, 0.3, 20, 0).unwrap();
        assert!(mu.samples().iter().all(|&x| x == mu.samples()[0]));
        assert_eq!(mu.covariance(), vec![0.0]);
    }

    #[test]
    fn hull_periodicity_with_shared_seeds_is_bitwise() {
        let c = ou();
        let s = Sampler::new(&c, 1e-3).unwrap();
        let (tau1, tau2) = c.periods();
        let t = FixedTime::from_f64(0.2);
        let r = FixedTime::from_f64(0.9);
        let a = estimate_rho_tilde(&s, t, r, 16, 100).unwrap();
        let b = estimate_rho_tilde(&s, t + tau1, r, 16, 100).unwrap();
        let d = estimate_rho_tilde(&s, t, r + tau2, 16, 100).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert_eq!(a.samples(), d.samples());
    }

    #[test]
    fn diagonal_matches_rho() {
        let c = ou();
        let s = Sampler::new(&c, 1e-3).unwrap();
        let a = estimate_rho_tilde(&s, 0.4, 0.4, 8, 7).unwrap();
        let b = estimate_rho(&s, 0.4, 8, 7).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn path_samples_agree_with_independent_pullbacks() {
        let c = ou();
        let s = Sampler::new(&c, 1e-3).unwrap();
        let path = estimate_rho_path(&s, 0, &[0, 500], 4, 9).unwrap();
        for i in 0..4 {
            let w = NoisePath::new(9 + i, 1, 1e-3).unwrap();
            let r = crate::pullback::pullback_phi(&c, &w, 500, &[0.0], &s.pullback).unwrap();
            assert!((path[1].sample(i as usize)[0] - r.value[0]).abs() < 3e-6);
        }
    }

    #[test]
    fn pushforward_of_zero_time_is_identity() {
        let c = ou();
        let mu = EmpiricalMeasure::uniform(1, vec![0.1, 0.2, 0.3]).unwrap();
        let grid = TimeGrid::new(1e-3).unwrap();
        assert_eq!(pushforward(&c, grid, &mu, 5, 5, 0).unwrap(), mu);
    }

    #[test]
    fn pushforward_of_point_mass_follows_the_ode() {
        let c = CoefficientSpec::scalar_ou(1.0, 0.0, vec![], 1.0, 2f64.sqrt()).build().unwrap();
        let grid = TimeGrid::new(1e-3).unwrap();
        let mu = EmpiricalMeasure::uniform(1, vec![1.0; 3]).unwrap();
        let nu = pushforward(&c, grid, &mu, 0, 1000, 0).unwrap();
        let expect = (1.0f64 - 1e-3).powi(1000);
        assert!(nu.samples().iter().all(|&x| (x - expect).abs() < 1e-12));
    }

    #[test]
    fn sample_generation_ignores_thread_count() {
        let c = ou();
        let s = Sampler::new(&c, 1e-3).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| estimate_rho(&s, 0.1, 6, 3).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
