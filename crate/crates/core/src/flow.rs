//! Euler–Maruyama integration of the semi-flow `u`, the shifted flow `u^r`
//! and the reparameterised flow `K^{r1,r2}`.
//!
//! All three share one stepping routine. At grid index `k` the coefficients
//! are frozen at `(k dt + r1, k dt + r2)` (left endpoint, Itô) and the state
//! moves by `b dt + sigma ΔW_k`. Because phases are fixed-point, shifting
//! `(r1, r2)` by whole grid steps is exactly a relabelling of `k`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::coefficients::{least_squares_slope, QpCoefficients};
use crate::error::{Error, Result};
use crate::noise::{NoisePath, TimeGrid};
use crate::time::FixedTime;

/// Which flow a trajectory was produced by.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "flavor")]
pub enum Flavor {
    U,
    /// `u^r` with `r = m dt`.
    Ur { m: i64 },
    K { r1: FixedTime, r2: FixedTime },
}

impl Flavor {
    fn header(&self) -> String {
        match self {
            Flavor::U => "flavor=u".to_string(),
            Flavor::Ur { m } => format!("flavor=u_r m={m}"),
            Flavor::K { r1, r2 } => format!("flavor=K r1={r1} r2={r2}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub start_index: i64,
    pub dim: usize,
    /// Row-major states, `values[i*dim..(i+1)*dim]` at index `start_index + i`.
    pub values: Vec<f64>,
    pub flavor: Flavor,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end_index(&self) -> i64 {
        self.start_index + self.len() as i64 - 1
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// State at absolute grid index `k`.
    pub fn at_index(&self, k: i64) -> Option<&[f64]> {
        let i = k - self.start_index;
        (0..self.len() as i64).contains(&i).then(|| self.state(i as usize))
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// CSV with a `#` metadata line, then `time,x_1..x_d`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# {} dt={} start_index={} dim={}",
            self.flavor.header(),
            self.grid.dt(),
            self.start_index,
            self.dim
        )?;
        let cols: Vec<String> = (1..=self.dim).map(|i| format!("x_{i}")).collect();
        writeln!(out, "time,{}", cols.join(","))?;
        for i in 0..self.len() {
            let t = self.grid.time_f64(self.start_index + i as i64);
            let row: Vec<String> = self.state(i).iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{t},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Supplies frozen coefficients and noise increments per grid index.
pub trait Driver {
    fn dim(&self) -> usize;
    fn frozen_len(&self) -> usize;
    fn dt(&self) -> f64;
    fn fill(&self, k: i64, frozen: &mut [f64], dw: &mut [f64]);
}

/// Evaluates everything on demand.
pub struct DirectDriver<'a> {
    pub coefficients: &'a QpCoefficients,
    pub noise: &'a NoisePath,
    pub r1: FixedTime,
    pub r2: FixedTime,
}

impl<'a> DirectDriver<'a> {
    pub fn new(c: &'a QpCoefficients, w: &'a NoisePath, r1: FixedTime, r2: FixedTime) -> Self {
        DirectDriver {
            coefficients: c,
            noise: w,
            r1,
            r2,
        }
    }
}

impl Driver for DirectDriver<'_> {
    fn dim(&self) -> usize {
        self.coefficients.dim()
    }

    fn frozen_len(&self) -> usize {
        self.coefficients.frozen_len()
    }

    fn dt(&self) -> f64 {
        self.noise.dt()
    }

    #[inline]
    fn fill(&self, k: i64, frozen: &mut [f64], dw: &mut [f64]) {
        let t = self.noise.grid().time_of(k);
        self.coefficients.freeze_into(t + self.r1, t + self.r2, frozen);
        self.noise.increment_into(k, dw);
    }
}

/// Reusable scratch space for [`step`].
pub struct Workspace {
    frozen: Vec<f64>,
    dw: Vec<f64>,
    next: Vec<f64>,
}

impl Workspace {
    pub fn new(c: &QpCoefficients) -> Self {
        Workspace {
            frozen: vec![0.0; c.frozen_len()],
            dw: vec![0.0; c.dim()],
            next: vec![0.0; c.dim()],
        }
    }
}

/// Advances `x` from index `from` to `to` in place. On a non-finite state the
/// error carries the first bad grid index.
pub fn advance<D: Driver>(
    c: &QpCoefficients,
    driver: &D,
    ws: &mut Workspace,
    x: &mut [f64],
    from: i64,
    to: i64,
    mut visit: impl FnMut(i64, &[f64]),
) -> Result<()> {
    let dt = driver.dt();
    if c.dim() == 1 {
        let mut xv = x[0];
        for k in from..to {
            driver.fill(k, &mut ws.frozen, &mut ws.dw);
            let next = c.scalar_step(&ws.frozen, xv, ws.dw[0], dt);
            if !next.is_finite() {
                return Err(Error::Explosion { index: k + 1 });
            }
            xv = next;
            x[0] = xv;
            visit(k + 1, x);
        }
        return Ok(());
    }
    for k in from..to {
        driver.fill(k, &mut ws.frozen, &mut ws.dw);
        euler_step(c, &ws.frozen, &ws.dw, dt, x, &mut ws.next);
        if !ws.next.iter().all(|v| v.is_finite()) {
            return Err(Error::Explosion { index: k + 1 });
        }
        x.copy_from_slice(&ws.next);
        visit(k + 1, x);
    }
    Ok(())
}

/// Scalar stepping over contiguous frozen data (`frozen_len` = 3 values per
/// step) and increments; `first` is the grid index of the first step.
/// Bitwise identical to [`advance`] in dimension one.
pub(crate) fn advance_scalar_slices(
    c: &QpCoefficients,
    frozen: &[f64],
    dw: &[f64],
    dt: f64,
    x0: f64,
    first: i64,
) -> Result<f64> {
    debug_assert_eq!(frozen.len(), 3 * dw.len());
    let mut x = x0;
    for (k, (f, w)) in frozen.chunks_exact(3).zip(dw).enumerate() {
        x = c.scalar_step(f, x, *w, dt);
        if !x.is_finite() {
            return Err(Error::Explosion {
                index: first + k as i64 + 1,
            });
        }
    }
    Ok(x)
}

#[inline]
pub(crate) fn euler_step(c: &QpCoefficients, frozen: &[f64], dw: &[f64], dt: f64, x: &[f64], next: &mut [f64]) {
    c.drift_frozen(frozen, x, next);
    for (n, xi) in next.iter_mut().zip(x) {
        *n = xi + *n * dt;
    }
    c.add_noise_frozen(frozen, x, dw, next);
}

/// The drift `b(t, x) = b(t, t, x)` the integrator uses at grid index `k`.
pub fn diagonal_drift(c: &QpCoefficients, grid: &TimeGrid, k: i64, x: &[f64]) -> Vec<f64> {
    let t = grid.time_of(k);
    let frozen = c.freeze(t, t);
    let mut out = vec![0.0; c.dim()];
    c.drift_frozen(&frozen, x, &mut out);
    out
}

fn check_call(c: &QpCoefficients, w: &NoisePath, s_idx: i64, t_idx: i64, x0: &[f64]) -> Result<()> {
    if t_idx < s_idx {
        return Err(Error::domain(format!("end index {t_idx} precedes start index {s_idx}")));
    }
    if x0.len() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            found: x0.len(),
        });
    }
    if w.dim() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            found: w.dim(),
        });
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::domain("non-finite initial condition"));
    }
    Ok(())
}

/// `K^{r1,r2}(t, s, x0)` sampled at every grid index of `[s_idx, t_idx]`.
pub fn integrate_k(
    c: &QpCoefficients,
    w: &NoisePath,
    r1: FixedTime,
    r2: FixedTime,
    s_idx: i64,
    t_idx: i64,
    x0: &[f64],
) -> Result<Trajectory> {
    let mut traj = integrate_flavored(c, w, r1, r2, s_idx, t_idx, x0)?;
    traj.flavor = Flavor::K { r1, r2 };
    Ok(traj)
}

/// `u(t, s, x0)`: the flow of the original equation.
pub fn integrate_u(c: &QpCoefficients, w: &NoisePath, s_idx: i64, t_idx: i64, x0: &[f64]) -> Result<Trajectory> {
    integrate_flavored(c, w, FixedTime::ZERO, FixedTime::ZERO, s_idx, t_idx, x0)
}

/// `u^r(t, s, x0) = u(t + r, s + r, x0) ∘ θ_{-r}` with `r = m dt`, reported
/// on the unshifted index range `[s_idx, t_idx]`.
pub fn integrate_ur(
    c: &QpCoefficients,
    w: &NoisePath,
    m: i64,
    s_idx: i64,
    t_idx: i64,
    x0: &[f64],
) -> Result<Trajectory> {
    let shifted = w.shift(-m);
    let mut traj = integrate_u(c, &shifted, s_idx + m, t_idx + m, x0)?;
    traj.start_index = s_idx;
    traj.flavor = Flavor::Ur { m };
    Ok(traj)
}

fn integrate_flavored(
    c: &QpCoefficients,
    w: &NoisePath,
    r1: FixedTime,
    r2: FixedTime,
    s_idx: i64,
    t_idx: i64,
    x0: &[f64],
) -> Result<Trajectory> {
    check_call(c, w, s_idx, t_idx, x0)?;
    let d = c.dim();
    let mut values = Vec::with_capacity((t_idx - s_idx + 1) as usize * d);
    values.extend_from_slice(x0);
    let mut x = x0.to_vec();
    let driver = DirectDriver::new(c, w, r1, r2);
    let mut ws = Workspace::new(c);
    advance(c, &driver, &mut ws, &mut x, s_idx, t_idx, |_, v| values.extend_from_slice(v))?;
    Ok(Trajectory {
        grid: w.grid(),
        start_index: s_idx,
        dim: d,
        values,
        flavor: Flavor::U,
    })
}

/// Terminal value of `K^{r1,r2}(t, s, x0)` without storing the path.
pub fn flow_k_value(
    c: &QpCoefficients,
    w: &NoisePath,
    r1: FixedTime,
    r2: FixedTime,
    s_idx: i64,
    t_idx: i64,
    x0: &[f64],
) -> Result<Vec<f64>> {
    check_call(c, w, s_idx, t_idx, x0)?;
    let mut x = x0.to_vec();
    let driver = DirectDriver::new(c, w, r1, r2);
    advance(c, &driver, &mut Workspace::new(c), &mut x, s_idx, t_idx, |_, _| {})?;
    Ok(x)
}

fn max_abs_deviation(a: &Trajectory, b: &Trajectory) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Deviation between the two sides of the time-shift relation
/// `K^{r1,r2}(t+r, s+r, x, θ_{-r}ω) = K^{r1+r, r2+r}(t, s, x, ω)`, `r = m dt`,
/// with the left side driven by `shift(w, noise_shift)`. The relation itself
/// uses `noise_shift = -m`; other values exist to check that the comparison
/// can fail.
pub fn shift_identity_deviation(
    c: &QpCoefficients,
    w: &NoisePath,
    r1: FixedTime,
    r2: FixedTime,
    m: i64,
    noise_shift: i64,
    s_idx: i64,
    t_idx: i64,
    x0: &[f64],
) -> Result<f64> {
    let step = w.grid().step();
    let lhs = integrate_k(c, &w.shift(noise_shift), r1, r2, s_idx + m, t_idx + m, x0)?;
    let rhs = integrate_k(c, w, r1 + step * m, r2 + step * m, s_idx, t_idx, x0)?;
    Ok(max_abs_deviation(&lhs, &rhs))
}

/// Max componentwise deviation of the time-shift relation; exactly zero for
/// the counter-based noise.
pub fn check_shift_identity(
    c: &QpCoefficients,
    w: &NoisePath,
    r1: f64,
    r2: f64,
    m: i64,
    s_idx: i64,
    t_idx: i64,
    x0: &[f64],
) -> Result<f64> {
    let r1 = FixedTime::try_from_f64(r1).ok_or_else(|| Error::domain("non-finite r1"))?;
    let r2 = FixedTime::try_from_f64(r2).ok_or_else(|| Error::domain("non-finite r2"))?;
    shift_identity_deviation(c, w, r1, r2, m, -m, s_idx, t_idx, x0)
}

/// Least-squares slope (per unit time) of `log |X_t^{s,x} - X_t^{s,y}|`
/// over `[s_idx + fit_from_steps, t_idx]`, both solutions on the same noise.
pub fn contraction_slope(
    c: &QpCoefficients,
    w: &NoisePath,
    s_idx: i64,
    t_idx: i64,
    x: &[f64],
    y: &[f64],
    fit_from_steps: i64,
) -> Result<f64> {
    let a = integrate_u(c, w, s_idx, t_idx, x)?;
    let b = integrate_u(c, w, s_idx, t_idx, y)?;
    let grid = w.grid();
    let mut pts = Vec::new();
    for k in (s_idx + fit_from_steps)..=t_idx {
        let (xa, xb) = (a.at_index(k).unwrap(), b.at_index(k).unwrap());
        let gap = xa.iter().zip(xb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        if gap > 0.0 {
            pts.push((grid.time_f64(k), gap.ln()));
        }
    }
    if pts.len() < 2 {
        return Err(Error::Numeric("trajectories coalesced; no slope to fit".into()));
    }
    Ok(least_squares_slope(&pts))
}
