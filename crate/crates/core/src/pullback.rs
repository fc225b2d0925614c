//! Pull-back construction of the random path `φ(t) = lim_{s→-∞} X_t^{s,x}`
//! and of its hull `φ̃(t, s) = φ^{t,s}(0)`.
//!
//! Start times recede in levels `s_k = t - k H` on one fixed noise
//! realisation. The level spacing `H = ceil(ln 10 / (α̂ - β̂²/2))` buys at
//! least one decimal digit per level. Successive terminal values are compared
//! until their gap drops below the tolerance.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::coefficients::{least_squares_slope, QpCoefficients};
use crate::error::{Error, Result};
use crate::flow::{advance, advance_scalar_slices, integrate_u, Driver, Workspace};
use crate::noise::{NoisePath, TimeGrid};
use crate::time::FixedTime;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullbackConfig {
    pub tol: f64,
    pub max_levels: usize,
    /// Level spacing `H` in grid steps.
    pub level_steps: i64,
    /// `L^p` order the run targets; enters only the rate diagnostics.
    pub p: f64,
    /// Contraction rate `α̂ - (p-1) β̂² / 2` the schedule was derived from.
    pub rate: f64,
}

impl PullbackConfig {
    pub const DEFAULT_TOL: f64 = 1e-6;
    pub const DEFAULT_MAX_LEVELS: usize = 30;

    /// Schedule derived from the audited constants of `c`.
    pub fn for_coefficients(c: &QpCoefficients, grid: &TimeGrid) -> Result<Self> {
        let audited = c.audited_constants()?;
        let p = 2.0;
        let rate = audited.contraction_rate(p);
        Self::with_rate(rate, grid, p)
    }

    pub fn with_rate(rate: f64, grid: &TimeGrid, p: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::domain(format!(
                "coefficients are not contractive (alpha - (p-1) beta^2/2 = {rate})"
            )));
        }
        let h_time = (std::f64::consts::LN_10 / rate).ceil();
        let level_steps = ((h_time / grid.dt()).round() as i64).max(1);
        Ok(PullbackConfig {
            tol: Self::DEFAULT_TOL,
            max_levels: Self::DEFAULT_MAX_LEVELS,
            level_steps,
            p,
            rate,
        })
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_levels(mut self, max_levels: usize) -> Self {
        self.max_levels = max_levels;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::domain(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.max_levels < 2 {
            return Err(Error::domain("max_levels must be at least 2"));
        }
        if self.level_steps < 1 {
            return Err(Error::domain("level spacing must be at least one step"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullbackLevel {
    /// Start time `s_k`.
    pub start_time: f64,
    pub start_index: i64,
    pub value: Vec<f64>,
    /// `|value_k - value_{k-1}|`; absent on the first level.
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullbackResult {
    pub value: Vec<f64>,
    pub levels: Vec<PullbackLevel>,
    pub converged: bool,
    /// Least-squares slope of `ln gap_k` against `s_k`; `None` with fewer
    /// than two positive gaps.
    pub fitted_rate: Option<f64>,
    pub p_norm_order: f64,
    pub seed: u64,
}

impl PullbackResult {
    pub fn gaps(&self) -> Vec<f64> {
        self.levels.iter().filter_map(|l| l.gap).collect()
    }

    pub fn last_gap(&self) -> Option<f64> {
        self.levels.last().and_then(|l| l.gap)
    }

    /// CSV of the convergence history: `s_k,gap_k`.
    pub fn write_levels_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "s_k,gap_k")?;
        for l in &self.levels {
            match l.gap {
                Some(g) => writeln!(out, "{},{g:e}", l.start_time)?,
                None => writeln!(out, "{},", l.start_time)?,
            }
        }
        Ok(())
    }
}

/// Frozen coefficients of `K^{r1,r2}` tabulated on an index range. Shared
/// read-only by every sample pulled back with the same phases.
pub struct ForcingTable<'a> {
    c: &'a QpCoefficients,
    grid: TimeGrid,
    r1: FixedTime,
    r2: FixedTime,
    lo: i64,
    hi: i64,
    data: Vec<f64>,
}

impl<'a> ForcingTable<'a> {
    pub fn new(c: &'a QpCoefficients, grid: TimeGrid, r1: FixedTime, r2: FixedTime, lo: i64, hi: i64) -> Self {
        let n = c.frozen_len();
        let mut data = vec![0.0; (hi - lo).max(0) as usize * n];
        for (i, chunk) in data.chunks_mut(n).enumerate() {
            let t = grid.time_of(lo + i as i64);
            c.freeze_into(t + r1, t + r2, chunk);
        }
        ForcingTable {
            c,
            grid,
            r1,
            r2,
            lo,
            hi,
            data,
        }
    }

    pub fn coefficients(&self) -> &'a QpCoefficients {
        self.c
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn phases(&self) -> (FixedTime, FixedTime) {
        (self.r1, self.r2)
    }

    #[inline]
    pub fn fill(&self, k: i64, out: &mut [f64]) {
        if k >= self.lo && k < self.hi {
            let n = out.len();
            let i = (k - self.lo) as usize * n;
            out.copy_from_slice(&self.data[i..i + n]);
        } else {
            let t = self.grid.time_of(k);
            self.c.freeze_into(t + self.r1, t + self.r2, out);
        }
    }
}

/// Increments of one noise path on `[lo, hi)`, grown towards the past.
struct NoiseCache<'a> {
    w: &'a NoisePath,
    lo: i64,
    hi: i64,
    data: Vec<f64>,
}

impl<'a> NoiseCache<'a> {
    fn new(w: &'a NoisePath, hi: i64) -> Self {
        NoiseCache {
            w,
            lo: hi,
            hi,
            data: Vec::new(),
        }
    }

    fn extend_to(&mut self, lo: i64) {
        if lo >= self.lo {
            return;
        }
        let d = self.w.dim();
        let mut fresh = vec![0.0; (self.lo - lo) as usize * d];
        for (i, chunk) in fresh.chunks_mut(d).enumerate() {
            self.w.increment_into(lo + i as i64, chunk);
        }
        fresh.extend_from_slice(&self.data);
        self.data = fresh;
        self.lo = lo;
    }
}

struct CachedDriver<'a, 'b> {
    forcing: &'b ForcingTable<'a>,
    noise: &'b NoiseCache<'a>,
}

impl Driver for CachedDriver<'_, '_> {
    fn dim(&self) -> usize {
        self.noise.w.dim()
    }

    fn frozen_len(&self) -> usize {
        self.forcing.c.frozen_len()
    }

    fn dt(&self) -> f64 {
        self.noise.w.dt()
    }

    #[inline]
    fn fill(&self, k: i64, frozen: &mut [f64], dw: &mut [f64]) {
        self.forcing.fill(k, frozen);
        if k >= self.noise.lo && k < self.noise.hi {
            let d = dw.len();
            let i = (k - self.noise.lo) as usize * d;
            dw.copy_from_slice(&self.noise.data[i..i + d]);
        } else {
            self.noise.w.increment_into(k, dw);
        }
    }
}

/// Tabulated coefficients with increments drawn from the noise on demand.
pub struct TabulatedDriver<'a, 'b> {
    pub table: &'b ForcingTable<'a>,
    pub noise: &'b NoisePath,
}

impl Driver for TabulatedDriver<'_, '_> {
    fn dim(&self) -> usize {
        self.noise.dim()
    }

    fn frozen_len(&self) -> usize {
        self.table.c.frozen_len()
    }

    fn dt(&self) -> f64 {
        self.noise.dt()
    }

    #[inline]
    fn fill(&self, k: i64, frozen: &mut [f64], dw: &mut [f64]) {
        self.table.fill(k, frozen);
        self.noise.increment_into(k, dw);
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pull-back of `K^{r1,r2}(t_idx, s, x0)` as `s → -∞` using a prepared
/// forcing table (whose phases must match).
pub fn pullback_with_table(
    table: &ForcingTable<'_>,
    w: &NoisePath,
    t_idx: i64,
    x0: &[f64],
    cfg: &PullbackConfig,
) -> Result<PullbackResult> {
    cfg.validate()?;
    let c = table.c;
    if x0.len() != c.dim() || w.dim() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            found: if x0.len() != c.dim() { x0.len() } else { w.dim() },
        });
    }
    if w.grid() != table.grid {
        return Err(Error::domain("noise grid differs from forcing table grid"));
    }
    let grid = w.grid();
    let mut noise = NoiseCache::new(w, t_idx);
    let mut ws = Workspace::new(c);
    let mut levels: Vec<PullbackLevel> = Vec::new();
    let mut converged = false;
    for k in 1..=cfg.max_levels as i64 {
        let s_idx = t_idx - k * cfg.level_steps;
        noise.extend_to(s_idx);
        let mut x = x0.to_vec();
        if c.dim() == 1 && table.lo <= s_idx && t_idx <= table.hi {
            let f = &table.data[(s_idx - table.lo) as usize * 3..(t_idx - table.lo) as usize * 3];
            let dw = &noise.data[(s_idx - noise.lo) as usize..(t_idx - noise.lo) as usize];
            x[0] = advance_scalar_slices(c, f, dw, grid.dt(), x0[0], s_idx)?;
        } else {
            let driver = CachedDriver {
                forcing: table,
                noise: &noise,
            };
            advance(c, &driver, &mut ws, &mut x, s_idx, t_idx, |_, _| {})?;
        }
        let gap = levels.last().map(|prev| distance(&prev.value, &x));
        levels.push(PullbackLevel {
            start_time: grid.time_f64(s_idx),
            start_index: s_idx,
            value: x,
            gap,
        });
        if gap.is_some_and(|g| g < cfg.tol) {
            converged = true;
            break;
        }
    }
    let pts: Vec<(f64, f64)> = levels
        .iter()
        .filter_map(|l| l.gap.filter(|&g| g > 0.0).map(|g| (l.start_time, g.ln())))
        .collect();
    let fitted_rate = (pts.len() >= 2).then(|| least_squares_slope(&pts));
    Ok(PullbackResult {
        value: levels.last().map(|l| l.value.clone()).unwrap_or_default(),
        levels,
        converged,
        fitted_rate,
        p_norm_order: cfg.p,
        seed: w.seed(),
    })
}

/// Forcing table sized for `levels` pull-back levels ending at `t_idx`.
pub fn forcing_table<'a>(
    c: &'a QpCoefficients,
    grid: TimeGrid,
    r1: FixedTime,
    r2: FixedTime,
    t_idx: i64,
    cfg: &PullbackConfig,
    levels: usize,
) -> ForcingTable<'a> {
    ForcingTable::new(c, grid, r1, r2, t_idx - levels as i64 * cfg.level_steps, t_idx)
}

/// `φ(t)` at grid index `t_idx` on the noise `w`.
pub fn pullback_phi(
    c: &QpCoefficients,
    w: &NoisePath,
    t_idx: i64,
    x0: &[f64],
    cfg: &PullbackConfig,
) -> Result<PullbackResult> {
    let table = ForcingTable::new(c, w.grid(), FixedTime::ZERO, FixedTime::ZERO, t_idx, t_idx);
    pullback_with_table(&table, w, t_idx, x0, cfg)
}

/// `φ̃(t, s) = φ^{t,s}(0)`: the pull-back of `K^{t,s}` to index 0.
pub fn pullback_phi_tilde(
    c: &QpCoefficients,
    w: &NoisePath,
    t_param: FixedTime,
    s_param: FixedTime,
    x0: &[f64],
    cfg: &PullbackConfig,
) -> Result<PullbackResult> {
    let table = ForcingTable::new(c, w.grid(), t_param, s_param, 0, 0);
    pullback_with_table(&table, w, 0, x0, cfg)
}

/// `|u(t, s, φ(s)) - φ(t)|`: how far a pulled-back path is from being
/// invariant under the flow.
pub fn verify_random_path(
    c: &QpCoefficients,
    w: &NoisePath,
    s_idx: i64,
    phi_s: &[f64],
    t_idx: i64,
    phi_t: &[f64],
) -> Result<f64> {
    let traj = integrate_u(c, w, s_idx, t_idx, phi_s)?;
    Ok(distance(traj.last(), phi_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientSpec;

    fn ou() -> QpCoefficients {
        CoefficientSpec::default_ou().build().unwrap()
    }

    #[test]
    fn schedule_gains_a_digit_per_level() {
        let grid = TimeGrid::new(1e-3).unwrap();
        let cfg = PullbackConfig::for_coefficients(&ou(), &grid).unwrap();
        // ceil(ln 10 / 1) = 3 time units
        assert_eq!(cfg.level_steps, 3000);
        assert!((cfg.rate - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_contractive_schedule_is_rejected() {
        let grid = TimeGrid::new(1e-3).unwrap();
        assert!(PullbackConfig::with_rate(-0.5, &grid, 2.0).is_err());
    }

    #[test]
    fn converges_at_unit_rate() {
        let c = ou();
        let w = NoisePath::new(17, 1, 1e-3).unwrap();
        let cfg = PullbackConfig::for_coefficients(&c, &w.grid()).unwrap();
        let res = pullback_phi(&c, &w, 0, &[10.0], &cfg).unwrap();
        assert!(res.converged);
        assert!(res.last_gap().unwrap() < 1e-6);
        let rate = res.fitted_rate.unwrap();
        assert!((rate - 1.0).abs() < 0.1, "{rate}");
    }

    #[test]
    fn deterministic_equilibrium_pulls_back_to_zero() {
        let c = CoefficientSpec::scalar_ou(1.0, 0.0, vec![], 1.0, 2f64.sqrt()).build().unwrap();
        let w = NoisePath::new(1, 1, 1e-2).unwrap();
        let cfg = PullbackConfig::with_rate(1.0, &w.grid(), 2.0).unwrap();
        let res = pullback_phi(&c, &w, 0, &[0.0], &cfg).unwrap();
        assert!(res.converged);
        assert_eq!(res.value, vec![0.0]);
    }

    #[test]
    fn limit_does_not_depend_on_initial_condition() {
        let c = ou();
        let w = NoisePath::new(23, 1, 1e-3).unwrap();
        let cfg = PullbackConfig::for_coefficients(&c, &w.grid()).unwrap();
        let a = pullback_phi(&c, &w, 500, &[0.0], &cfg).unwrap();
        let b = pullback_phi(&c, &w, 500, &[10.0], &cfg).unwrap();
        assert!(a.converged && b.converged);
        assert!(distance(&a.value, &b.value) < 2e-6);
    }

    #[test]
    fn not_converged_is_reported_not_raised() {
        let c = ou();
        let w = NoisePath::new(2, 1, 1e-3).unwrap();
        let cfg = PullbackConfig::for_coefficients(&c, &w.grid())
            .unwrap()
            .with_tol(1e-30)
            .with_max_levels(3);
        let res = pullback_phi(&c, &w, 0, &[1.0], &cfg).unwrap();
        assert!(!res.converged);
        assert_eq!(res.levels.len(), 3);
    }

    #[test]
    fn hull_is_periodic_in_both_parameters() {
        let c = ou();
        let (tau1, tau2) = c.periods();
        let w = NoisePath::new(31, 1, 1e-3).unwrap();
        let cfg = PullbackConfig::for_coefficients(&c, &w.grid()).unwrap();
        let t = FixedTime::from_f64(0.3);
        let s = FixedTime::from_f64(1.1);
        let base = pullback_phi_tilde(&c, &w, t, s, &[0.0], &cfg).unwrap();
        let p1 = pullback_phi_tilde(&c, &w, t + tau1, s, &[0.0], &cfg).unwrap();
        let p2 = pullback_phi_tilde(&c, &w, t, s + tau2, &[0.0], &cfg).unwrap();
        assert_eq!(base.value, p1.value);
        assert_eq!(base.value, p2.value);
    }

    #[test]
    fn hull_diagonal_is_the_pulled_back_path() {
        let c = ou();
        let w = NoisePath::new(37, 1, 1e-3).unwrap();
        let cfg = PullbackConfig::for_coefficients(&c, &w.grid()).unwrap();
        let m = 1234;
        let r = w.grid().time_of(m);
        let tilde = pullback_phi_tilde(&c, &w, r, r, &[0.0], &cfg).unwrap();
        let phi = pullback_phi(&c, &w.shift(-m), m, &[0.0], &cfg).unwrap();
        assert!(distance(&tilde.value, &phi.value) <= 2.0 * cfg.tol);
    }

    #[test]
    fn pulled_back_path_is_flow_invariant() {
        let c = ou();
        let w = NoisePath::new(41, 1, 1e-3).unwrap();
        let cfg = PullbackConfig::for_coefficients(&c, &w.grid()).unwrap();
        let phi0 = pullback_phi(&c, &w, 0, &[0.0], &cfg).unwrap();
        let phi2 = pullback_phi(&c, &w, 2000, &[0.0], &cfg).unwrap();
        let dev = verify_random_path(&c, &w, 0, &phi0.value, 2000, &phi2.value).unwrap();
        assert!(dev < 5e-6, "{dev}");
        assert_eq!(verify_random_path(&c, &w, 0, &phi0.value, 0, &phi0.value).unwrap(), 0.0);
    }

    #[test]
    fn table_and_direct_evaluation_agree_bitwise() {
        let c = ou();
        let w = NoisePath::new(43, 1, 1e-3).unwrap();
        let cfg = PullbackConfig::for_coefficients(&c, &w.grid()).unwrap();
        let r1 = FixedTime::from_f64(0.7);
        let r2 = FixedTime::from_f64(0.2);
        let short = forcing_table(&c, w.grid(), r1, r2, 0, &cfg, 2);
        let a = pullback_with_table(&short, &w, 0, &[0.0], &cfg).unwrap();
        let b = pullback_phi_tilde(&c, &w, r1, r2, &[0.0], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn levels_csv_lists_every_level() {
        let c = ou();
        let w = NoisePath::new(3, 1, 1e-3).unwrap();
        let cfg = PullbackConfig::for_coefficients(&c, &w.grid()).unwrap();
        let res = pullback_phi(&c, &w, 0, &[1.0], &cfg).unwrap();
        let mut buf = Vec::new();
        res.write_levels_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), res.levels.len() + 1);
        assert!(text.starts_with("s_k,gap_k\n-3,\n"));
    }
}
