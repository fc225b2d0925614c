//! One-dimensional Fokker–Planck solver for the density of the entrance
//! measure, `∂_t q = -∂_x(b q) + ½ ∂_xx(D q)` with `D = σ²`.
//!
//! Finite volumes on a uniform cell grid. The face flux uses the
//! Chang–Cooper weighting (written through the Bernoulli function
//! `z / (e^z - 1)`), which keeps the off-diagonals of the discrete operator
//! nonnegative and reproduces local equilibria exactly. Time stepping is
//! Crank–Nicolson with a tridiagonal solve; both boundaries are zero flux, so
//! every column of the operator sums to zero and mass is conserved up to
//! rounding.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::coefficients::{Nonlinearity, QpCoefficients};
use crate::error::{Error, Result};
use crate::measures::{estimate_rho_path, EmpiricalMeasure, Sampler};
use crate::ou_analytic::{ou_rho, OuSpec};
use crate::time::FixedTime;

pub const MIN_CELLS: usize = 16;
/// Mass tolerance of a density snapshot.
pub const MASS_TOL: f64 = 1e-8;

/// Cell-averaged density on `[x_lo, x_hi]` at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    x_lo: f64,
    x_hi: f64,
    time: FixedTime,
    values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(x_lo: f64, x_hi: f64, time: impl Into<FixedTime>, values: Vec<f64>) -> Result<Self> {
        let g = Self::unchecked(x_lo, x_hi, time.into(), values)?;
        if let Some(v) = g.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::domain(format!("density values must be finite and nonnegative, found {v}")));
        }
        let mass = g.mass();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::domain(format!("density mass {mass} differs from 1")));
        }
        Ok(g)
    }

    fn unchecked(x_lo: f64, x_hi: f64, time: FixedTime, values: Vec<f64>) -> Result<Self> {
        if !(x_lo.is_finite() && x_hi.is_finite() && x_lo < x_hi) {
            return Err(Error::domain(format!("bad domain [{x_lo}, {x_hi}]")));
        }
        if values.len() < MIN_CELLS {
            return Err(Error::domain(format!("need at least {MIN_CELLS} cells, got {}", values.len())));
        }
        Ok(DensityGrid {
            x_lo,
            x_hi,
            time,
            values,
        })
    }

    /// Cell averages of the law with distribution function `cdf`, renormalised
    /// to the mass inside the domain.
    pub fn from_cdf(x_lo: f64, x_hi: f64, n_cells: usize, time: impl Into<FixedTime>, cdf: impl Fn(f64) -> f64) -> Result<Self> {
        let mut g = Self::unchecked(x_lo, x_hi, time.into(), vec![0.0; n_cells])?;
        let h = g.cell_width();
        let edges: Vec<f64> = (0..=n_cells).map(|j| cdf(g.edge(j))).collect();
        let inside = edges[n_cells] - edges[0];
        if !(inside > 0.0) {
            return Err(Error::domain("law has no mass inside the domain"));
        }
        for (j, v) in g.values.iter_mut().enumerate() {
            *v = (edges[j + 1] - edges[j]).max(0.0) / (inside * h);
        }
        let mass = g.mass();
        g.values.iter_mut().for_each(|v| *v /= mass);
        Ok(g)
    }

    /// Normal density with the given mean and standard deviation.
    pub fn gaussian(x_lo: f64, x_hi: f64, n_cells: usize, time: impl Into<FixedTime>, mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0) {
            return Err(Error::domain("standard deviation must be positive"));
        }
        Self::from_cdf(x_lo, x_hi, n_cells, time, |x| normal_cdf((x - mean) / sd))
    }

    pub fn x_lo(&self) -> f64 {
        self.x_lo
    }

    pub fn x_hi(&self) -> f64 {
        self.x_hi
    }

    pub fn n_cells(&self) -> usize {
        self.values.len()
    }

    pub fn cell_width(&self) -> f64 {
        (self.x_hi - self.x_lo) / self.values.len() as f64
    }

    pub fn edge(&self, j: usize) -> f64 {
        self.x_lo + j as f64 * self.cell_width()
    }

    pub fn center(&self, j: usize) -> f64 {
        self.x_lo + (j as f64 + 0.5) * self.cell_width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells()).map(|j| self.center(j)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn time(&self) -> f64 {
        self.time.to_f64()
    }

    pub fn time_fixed(&self) -> FixedTime {
        self.time
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_width()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Mass of `[x_lo, x]`, exact for the piecewise constant density.
    pub fn cumulative_mass(&self, x: f64) -> f64 {
        let h = self.cell_width();
        let u = ((x - self.x_lo) / h).clamp(0.0, self.n_cells() as f64);
        let full = (u.floor() as usize).min(self.n_cells());
        let mut m: f64 = self.values[..full].iter().sum::<f64>() * h;
        if full < self.n_cells() {
            m += self.values[full] * (u - full as f64) * h;
        }
        m
    }

    /// `∫|q - p| dx` against a density on the same grid.
    pub fn l1_distance(&self, other: &DensityGrid) -> Result<f64> {
        if self.n_cells() != other.n_cells() || self.x_lo != other.x_lo || self.x_hi != other.x_hi {
            return Err(Error::domain("density grids differ"));
        }
        let h = self.cell_width();
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum::<f64>() * h)
    }

    /// Total variation type distance `Σ_j |mass_j - law_j|` plus the mass of
    /// the law outside the domain.
    pub fn l1_to_cdf(&self, cdf: impl Fn(f64) -> f64) -> f64 {
        let h = self.cell_width();
        let mut prev = cdf(self.x_lo);
        let mut sum = prev;
        for (j, v) in self.values.iter().enumerate() {
            let next = cdf(self.edge(j + 1));
            sum += (v * h - (next - prev)).abs();
            prev = next;
        }
        sum + (1.0 - prev)
    }

    /// `x,q` rows after a `# time = t` header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# time = {}", self.time())?;
        writeln!(out, "x,q")?;
        for (j, v) in self.values.iter().enumerate() {
            writeln!(out, "{},{v:e}", self.center(j))?;
        }
        Ok(())
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Coefficients of the forward equation.
pub trait FpOperator: Sync {
    /// Fills drift `b(t, x)` and `D(t, x) = σ(t, x)²` at the points `xs`.
    fn coefficients(&self, t: FixedTime, xs: &[f64], drift: &mut [f64], diffusion_sq: &mut [f64]) -> Result<()>;
}

/// The forward operator of a scalar quasi-periodic SDE with its time
/// argument shifted by `shift`: `b^r(t, x) = b(t + r, t + r, x)`.
pub struct CoefficientOperator<'a> {
    c: &'a QpCoefficients,
    shift: FixedTime,
}

impl<'a> CoefficientOperator<'a> {
    pub fn new(c: &'a QpCoefficients) -> Result<Self> {
        Self::shifted(c, FixedTime::ZERO)
    }

    pub fn shifted(c: &'a QpCoefficients, shift: impl Into<FixedTime>) -> Result<Self> {
        if c.dim() != 1 {
            return Err(Error::domain(format!("Fokker-Planck solver is one-dimensional, got d = {}", c.dim())));
        }
        let floor = sigma_floor(c);
        if !(floor > 0.0) {
            return Err(Error::domain(format!(
                "diffusion is not uniformly elliptic (lower bound of |sigma| is {floor})"
            )));
        }
        Ok(CoefficientOperator {
            c,
            shift: shift.into(),
        })
    }

    /// Lower bound of `D` used for the ellipticity check.
    pub fn diffusion_floor(&self) -> f64 {
        sigma_floor(self.c).powi(2)
    }
}

/// Lower bound of `|σ0 + g(t) σ1 h(x)|` over time and space.
fn sigma_floor(c: &QpCoefficients) -> f64 {
    let saturation = match c.nonlinearity() {
        Nonlinearity::None => 0.0,
        Nonlinearity::Tanh => 1.0,
    };
    c.sigma0()[0].abs() - c.sigma1()[0].abs() * c.g().amplitude_bound() * saturation
}

impl FpOperator for CoefficientOperator<'_> {
    fn coefficients(&self, t: FixedTime, xs: &[f64], drift: &mut [f64], diffusion_sq: &mut [f64]) -> Result<()> {
        let t = t + self.shift;
        let frozen = self.c.freeze(t, t);
        let mut b = [0.0];
        let mut s = [0.0];
        for ((x, bo), d) in xs.iter().zip(drift.iter_mut()).zip(diffusion_sq.iter_mut()) {
            self.c.drift_frozen(&frozen, std::slice::from_ref(x), &mut b);
            self.c.diffusion_frozen(&frozen, std::slice::from_ref(x), &mut s);
            *bo = b[0];
            *d = s[0] * s[0];
        }
        Ok(())
    }
}

/// Operator from plain functions of `(t, x)`.
pub struct FnOperator<B, D> {
    pub drift: B,
    pub diffusion_sq: D,
}

impl<B, D> FpOperator for FnOperator<B, D>
where
    B: Fn(f64, f64) -> f64 + Sync,
    D: Fn(f64, f64) -> f64 + Sync,
{
    fn coefficients(&self, t: FixedTime, xs: &[f64], drift: &mut [f64], diffusion_sq: &mut [f64]) -> Result<()> {
        let t = t.to_f64();
        for ((x, b), d) in xs.iter().zip(drift.iter_mut()).zip(diffusion_sq.iter_mut()) {
            *b = (self.drift)(t, *x);
            *d = (self.diffusion_sq)(t, *x);
        }
        Ok(())
    }
}

/// `z / (e^z - 1)`, continuous through 0.
fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        let z2 = z * z;
        1.0 - 0.5 * z + z2 / 12.0 - z2 * z2 / 720.0
    } else {
        z / z.exp_m1()
    }
}

/// Tridiagonal discrete operator: `(L q)_j = lower_j q_{j-1} + diag_j q_j + upper_j q_{j+1}`.
struct Tridiagonal {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

struct Assembler<'o, O: ?Sized> {
    op: &'o O,
    centers: Vec<f64>,
    faces: Vec<f64>,
    h: f64,
    b_face: Vec<f64>,
    d_face: Vec<f64>,
    b_cell: Vec<f64>,
    d_cell: Vec<f64>,
}

impl<'o, O: FpOperator + ?Sized> Assembler<'o, O> {
    fn new(op: &'o O, grid: &DensityGrid) -> Self {
        let n = grid.n_cells();
        Assembler {
            op,
            centers: grid.centers(),
            faces: (1..n).map(|j| grid.edge(j)).collect(),
            h: grid.cell_width(),
            b_face: vec![0.0; n - 1],
            d_face: vec![0.0; n - 1],
            b_cell: vec![0.0; n],
            d_cell: vec![0.0; n],
        }
    }

    fn assemble(&mut self, t: FixedTime, out: &mut Tridiagonal) -> Result<()> {
        self.op.coefficients(t, &self.faces, &mut self.b_face, &mut self.d_face)?;
        self.op.coefficients(t, &self.centers, &mut self.b_cell, &mut self.d_cell)?;
        if let Some(d) = self.d_face.iter().chain(&self.d_cell).find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(Error::domain(format!("diffusion coefficient {d} is not positive")));
        }
        let n = self.centers.len();
        let h = self.h;
        out.diag.iter_mut().for_each(|v| *v = 0.0);
        out.lower.iter_mut().for_each(|v| *v = 0.0);
        out.upper.iter_mut().for_each(|v| *v = 0.0);
        for f in 0..n - 1 {
            // Flux through the face between cells f and f+1:
            // F = alpha q_f + beta q_{f+1}, alpha >= 0 >= beta.
            let adv = self.b_face[f] - 0.5 * (self.d_cell[f + 1] - self.d_cell[f]) / h;
            let diff = 0.5 * self.d_face[f];
            let w = adv * h / diff;
            let alpha = diff / h * bernoulli(-w);
            let beta = -diff / h * bernoulli(w);
            out.diag[f] -= alpha / h;
            out.upper[f] -= beta / h;
            out.lower[f + 1] += alpha / h;
            out.diag[f + 1] += beta / h;
        }
        Ok(())
    }
}

/// Result of a solve.
#[derive(Clone, Debug)]
pub struct FpSolution {
    pub density: DensityGrid,
    pub steps: usize,
    pub dt: f64,
    /// Largest per-step change of total mass.
    pub max_mass_drift: f64,
    /// Smallest cell value met along the way.
    pub min_value: f64,
}

/// Advances `q0` from its own time to `t1` with steps of at most `dt_pde`.
pub fn fp_solve<O: FpOperator + ?Sized>(op: &O, q0: &DensityGrid, t1: impl Into<FixedTime>, dt_pde: f64) -> Result<FpSolution> {
    let mut out = fp_solve_nodes(op, q0, &[t1.into()], dt_pde)?;
    Ok(out.pop().expect("one node"))
}

/// Solves through the increasing times `nodes`, returning the density at
/// each. Step sizes are uniform within each segment.
pub fn fp_solve_nodes<O: FpOperator + ?Sized>(op: &O, q0: &DensityGrid, nodes: &[FixedTime], dt_pde: f64) -> Result<Vec<FpSolution>> {
    if !(dt_pde > 0.0 && dt_pde.is_finite()) {
        return Err(Error::domain(format!("PDE time step must be positive, got {dt_pde}")));
    }
    let mut prev = q0.time;
    let mut plan = Vec::with_capacity(nodes.len());
    for &t in nodes {
        if t < prev {
            return Err(Error::domain("Fokker-Planck nodes must not decrease"));
        }
        let span = (t - prev).to_f64();
        let steps = (span / dt_pde).ceil() as i64;
        let step = if steps > 0 {
            FixedTime::from_raw((t - prev).raw() / steps as i128)
        } else {
            FixedTime::ZERO
        };
        plan.push((prev, t, steps, step));
        prev = t;
    }

    let n = q0.n_cells();
    let mut asm = Assembler::new(op, q0);
    let mut lt = Tridiagonal {
        lower: vec![0.0; n],
        diag: vec![0.0; n],
        upper: vec![0.0; n],
    };

    // Stability: the explicit half must keep a nonnegative diagonal.
    for &(start, _, steps, step) in &plan {
        let dt = step.to_f64();
        for k in 0..=steps {
            asm.assemble(start + step * k, &mut lt)?;
            let worst = lt.diag.iter().copied().fold(0.0, f64::min);
            if 1.0 + 0.5 * dt * worst < 0.0 {
                return Err(Error::Stability { dt, bound: -2.0 / worst });
            }
        }
    }

    let h = q0.cell_width();
    let mut q = q0.values.clone();
    let mut next_l = Tridiagonal {
        lower: vec![0.0; n],
        diag: vec![0.0; n],
        upper: vec![0.0; n],
    };
    let mut rhs = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut out = Vec::with_capacity(plan.len());
    let mut total_steps = 0usize;
    let mut max_drift: f64 = 0.0;
    let mut min_value = q0.min_value();
    for &(start, end, steps, step) in &plan {
        let dt = step.to_f64();
        if steps > 0 {
            asm.assemble(start, &mut lt)?;
        }
        for k in 0..steps {
            // Land exactly on the node at the end of the segment.
            let t_next = if k + 1 == steps { end } else { start + step * (k + 1) };
            asm.assemble(t_next, &mut next_l)?;
            let before: f64 = q.iter().sum::<f64>() * h;
            for j in 0..n {
                let mut v = q[j] + 0.5 * dt * lt.diag[j] * q[j];
                if j > 0 {
                    v += 0.5 * dt * lt.lower[j] * q[j - 1];
                }
                if j + 1 < n {
                    v += 0.5 * dt * lt.upper[j] * q[j + 1];
                }
                rhs[j] = v;
            }
            solve_implicit(&next_l, 0.5 * dt, &rhs, &mut q, &mut scratch);
            let after: f64 = q.iter().sum::<f64>() * h;
            let drift = (after - before).abs();
            total_steps += 1;
            if !(drift <= MASS_TOL) {
                return Err(Error::MassDrift { step: total_steps, drift });
            }
            max_drift = max_drift.max(drift);
            min_value = q.iter().copied().fold(min_value, f64::min);
            std::mem::swap(&mut lt, &mut next_l);
        }
        out.push(FpSolution {
            density: DensityGrid {
                x_lo: q0.x_lo,
                x_hi: q0.x_hi,
                time: end,
                values: q.clone(),
            },
            steps: total_steps,
            dt,
            max_mass_drift: max_drift,
            min_value,
        });
    }
    Ok(out)
}

/// Thomas solve of `(I - c L) q = rhs`.
fn solve_implicit(l: &Tridiagonal, c: f64, rhs: &[f64], q: &mut [f64], cp: &mut [f64]) {
    let n = rhs.len();
    let diag = |j: usize| 1.0 - c * l.diag[j];
    let mut denom = diag(0);
    cp[0] = -c * l.upper[0] / denom;
    q[0] = rhs[0] / denom;
    for j in 1..n {
        let a = -c * l.lower[j];
        denom = diag(j) - a * cp[j - 1];
        cp[j] = if j + 1 < n { -c * l.upper[j] / denom } else { 0.0 };
        q[j] = (rhs[j] - a * q[j - 1]) / denom;
    }
    for j in (0..n - 1).rev() {
        q[j] -= cp[j] * q[j + 1];
    }
}

/// Transition density `p(t, s, x, ·)` started from a normal of width two
/// cells centred at `x`.
pub fn transition_density<O: FpOperator + ?Sized>(
    op: &O,
    domain: (f64, f64),
    n_cells: usize,
    s: impl Into<FixedTime>,
    x: f64,
    t: impl Into<FixedTime>,
    dt_pde: f64,
) -> Result<FpSolution> {
    let width = (domain.1 - domain.0) / n_cells as f64;
    let q0 = DensityGrid::gaussian(domain.0, domain.1, n_cells, s, x, 2.0 * width)?;
    fp_solve(op, &q0, t, dt_pde)
}

/// Where the initial density of a residual run comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDensity {
    /// Closed-form Gaussian law of the linear model.
    Analytic,
    /// Histogram of the pull-back samples at the first node.
    Histogram,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualConfig {
    /// Comparison times; the first is the start of the solve. Must lie on the
    /// sampler's time grid.
    pub nodes: Vec<f64>,
    pub n_cells: usize,
    pub dt_pde: f64,
    pub n_samples: usize,
    pub seed0: u64,
    pub initial: InitialDensity,
    /// Half-width of the domain in standard deviations beyond the mean range.
    pub domain_sds: f64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        ResidualConfig {
            nodes: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            n_cells: 400,
            dt_pde: 1e-3,
            n_samples: 10_000,
            seed0: 0,
            initial: InitialDensity::Analytic,
            domain_sds: 8.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeResidual {
    pub time: f64,
    /// `Σ_bins |histogram mass - solver mass|` plus solver mass outside the
    /// histogram range.
    pub l1: f64,
    pub n_bins: usize,
    pub bin_width: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualReport {
    pub nodes: Vec<NodeResidual>,
    pub max_l1: f64,
    pub max_mass_drift: f64,
    pub min_density: f64,
    pub domain: (f64, f64),
    pub n_cells: usize,
    pub n_samples: usize,
    pub initial: InitialDensity,
}

impl ResidualReport {
    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Histogram with Scott's-rule bin width over the sample range.
#[derive(Clone, Debug)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub masses: Vec<f64>,
}

impl Histogram {
    pub fn scott(mu: &EmpiricalMeasure) -> Result<Histogram> {
        if mu.dim() != 1 {
            return Err(Error::domain("histograms are one-dimensional"));
        }
        if mu.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        let xs = mu.samples();
        let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let sd = mu.covariance()[0].max(0.0).sqrt();
        let n = mu.len() as f64;
        let scott = 3.49 * sd * n.powf(-1.0 / 3.0);
        let span = hi - lo;
        let n_bins = if span > 0.0 && scott > 0.0 { (span / scott).ceil() as usize } else { 1 };
        let width = if span > 0.0 { span / n_bins as f64 } else { 1.0 };
        let mut masses = vec![0.0; n_bins];
        for (x, w) in xs.iter().zip(mu.weights()) {
            let b = (((x - lo) / width) as usize).min(n_bins - 1);
            masses[b] += w;
        }
        Ok(Histogram { lo, width, masses })
    }

    pub fn edge(&self, b: usize) -> f64 {
        self.lo + b as f64 * self.width
    }

    /// Binned L1 gap to a solver density, counting its mass outside the range.
    pub fn l1_to_density(&self, q: &DensityGrid) -> f64 {
        let mut prev = q.cumulative_mass(self.lo);
        let outside_lo = prev;
        let mut sum = 0.0;
        for (b, m) in self.masses.iter().enumerate() {
            let next = q.cumulative_mass(self.edge(b + 1));
            sum += (m - (next - prev)).abs();
            prev = next;
        }
        sum + outside_lo + (q.mass() - prev).max(0.0)
    }

    /// The histogram as cell averages on the solver grid.
    pub fn to_density(&self, x_lo: f64, x_hi: f64, n_cells: usize, time: FixedTime) -> Result<DensityGrid> {
        let cdf = |x: f64| {
            let u = ((x - self.lo) / self.width).clamp(0.0, self.masses.len() as f64);
            let full = (u.floor() as usize).min(self.masses.len());
            let mut m: f64 = self.masses[..full].iter().sum();
            if full < self.masses.len() {
                m += self.masses[full] * (u - full as f64);
            }
            m
        };
        DensityGrid::from_cdf(x_lo, x_hi, n_cells, time, cdf)
    }
}

/// Solves the forward equation across `cfg.nodes` and compares with
/// histograms of independent pull-back samples of `ρ_t` at every node.
pub fn fp_entrance_residual(sampler: &Sampler<'_>, cfg: &ResidualConfig) -> Result<ResidualReport> {
    let c = sampler.coefficients;
    let op = CoefficientOperator::new(c)?;
    if cfg.nodes.is_empty() {
        return Err(Error::domain("residual needs at least one node"));
    }
    let grid = sampler.grid;
    let mut indices = Vec::with_capacity(cfg.nodes.len());
    for &t in &cfg.nodes {
        let k = grid.index_of(t);
        if (grid.time_f64(k) - t).abs() > 1e-9 * t.abs().max(1.0) {
            return Err(Error::domain(format!("node {t} is not on the time grid")));
        }
        indices.push(k);
    }
    let times: Vec<FixedTime> = indices.iter().map(|&k| grid.time_of(k)).collect();
    let mc = estimate_rho_path(sampler, indices[0], &indices, cfg.n_samples, cfg.seed0)?;

    let (x_lo, x_hi, q0) = match cfg.initial {
        InitialDensity::Analytic => {
            let spec = OuSpec::from_coefficients(c)?;
            let laws = cfg.nodes.iter().map(|&t| ou_rho(&spec, t)).collect::<Result<Vec<_>>>()?;
            let (lo, hi) = domain_from(laws.iter().map(|l| (l.mean[0], l.variance(0).sqrt())), cfg.domain_sds);
            let q0 = DensityGrid::from_cdf(lo, hi, cfg.n_cells, times[0], |x| laws[0].cdf_1d(x))?;
            (lo, hi, q0)
        }
        InitialDensity::Histogram => {
            let (lo, hi) = domain_from(mc.iter().map(|m| (m.mean()[0], m.covariance()[0].sqrt())), cfg.domain_sds);
            let q0 = Histogram::scott(&mc[0])?.to_density(lo, hi, cfg.n_cells, times[0])?;
            (lo, hi, q0)
        }
    };

    let sols = fp_solve_nodes(&op, &q0, &times, cfg.dt_pde)?;
    let mut nodes = Vec::with_capacity(sols.len());
    for ((sol, mu), &t) in sols.iter().zip(&mc).zip(&cfg.nodes) {
        let hist = Histogram::scott(mu)?;
        nodes.push(NodeResidual {
            time: t,
            l1: hist.l1_to_density(&sol.density),
            n_bins: hist.masses.len(),
            bin_width: hist.width,
        });
    }
    let last = sols.last().expect("nonempty");
    Ok(ResidualReport {
        max_l1: nodes.iter().map(|n| n.l1).fold(0.0, f64::max),
        nodes,
        max_mass_drift: last.max_mass_drift,
        min_density: last.min_value,
        domain: (x_lo, x_hi),
        n_cells: cfg.n_cells,
        n_samples: cfg.n_samples,
        initial: cfg.initial,
    })
}

fn domain_from(stats: impl Iterator<Item = (f64, f64)>, sds: f64) -> (f64, f64) {
    let (lo, hi, sd) = stats.fold((f64::INFINITY, f64::NEG_INFINITY, 0.0f64), |(lo, hi, s), (m, sd)| {
        (lo.min(m), hi.max(m), s.max(sd))
    });
    (lo - sds * sd, hi + sds * sd)
}

/// L1 gap between the solution with shifted coefficients started at `t0`
/// and the unshifted solution started at `t0 + r` from the same density,
/// both observed after `span`.
pub fn shift_relation_gap(
    c: &QpCoefficients,
    q0: &DensityGrid,
    r: impl Into<FixedTime>,
    span: impl Into<FixedTime>,
    dt_pde: f64,
) -> Result<f64> {
    let r = r.into();
    let span = span.into();
    let shifted = CoefficientOperator::shifted(c, r)?;
    let base = CoefficientOperator::new(c)?;
    let start = q0.time_fixed();
    let a = fp_solve(&shifted, q0, start + span, dt_pde)?;
    let moved = DensityGrid {
        time: start + r,
        ..q0.clone()
    };
    let b = fp_solve(&base, &moved, start + r + span, dt_pde)?;
    a.density.l1_distance(&b.density)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientSpec, TrigTerm};

    fn heat() -> FnOperator<impl Fn(f64, f64) -> f64 + Sync, impl Fn(f64, f64) -> f64 + Sync> {
        FnOperator {
            drift: |_, _| 0.0,
            diffusion_sq: |_, _| 1.0,
        }
    }

    #[test]
    fn bernoulli_is_smooth_at_zero() {
        for z in [1e-3, -1e-3, 0.999e-3, -0.999e-3] {
            let exact = z / f64::exp_m1(z);
            assert!((bernoulli(z) - exact).abs() < 1e-15, "{z}");
        }
        assert_eq!(bernoulli(0.0), 1.0);
        assert!((bernoulli(-3.0) - bernoulli(3.0) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn heat_kernel_spreads_gaussian() {
        let q0 = DensityGrid::gaussian(-8.0, 8.0, 400, 0.0, 0.0, 0.5f64.sqrt()).unwrap();
        let sol = fp_solve(&heat(), &q0, 0.5, 1e-3).unwrap();
        let l1 = sol.density.l1_to_cdf(|x| normal_cdf(x));
        assert!(l1 < 0.01, "L1 {l1}");
        assert!(sol.max_mass_drift < 1e-12);
        assert!(sol.min_value >= 0.0);
    }

    #[test]
    fn zero_interval_returns_input() {
        let q0 = DensityGrid::gaussian(-4.0, 4.0, 64, 0.3, 0.1, 0.7).unwrap();
        let sol = fp_solve(&heat(), &q0, q0.time_fixed(), 1e-3).unwrap();
        assert_eq!(sol.density, q0);
        assert_eq!(sol.steps, 0);
    }

    #[test]
    fn unstable_step_is_rejected_before_stepping() {
        let q0 = DensityGrid::gaussian(-1.0, 1.0, 400, 0.0, 0.0, 0.2).unwrap();
        let err = fp_solve(&heat(), &q0, 1.0, 0.1).unwrap_err();
        assert!(matches!(err, Error::Stability { .. }), "{err}");
    }

    #[test]
    fn degenerate_diffusion_is_rejected() {
        let c = CoefficientSpec::scalar_ou(1.0, 0.0, vec![], 1.0, 2f64.sqrt()).build().unwrap();
        assert!(CoefficientOperator::new(&c).is_err());
    }

    #[test]
    fn ornstein_uhlenbeck_follows_analytic_law() {
        let c = CoefficientSpec::default_ou().build().unwrap();
        let spec = OuSpec::from_coefficients(&c).unwrap();
        let (t0, t1) = (0.3, 1.3);
        let r0 = ou_rho(&spec, t0).unwrap();
        let r1 = ou_rho(&spec, t1).unwrap();
        let q0 = DensityGrid::from_cdf(-6.0, 6.0, 400, t0, |x| r0.cdf_1d(x)).unwrap();
        let op = CoefficientOperator::new(&c).unwrap();
        let sol = fp_solve(&op, &q0, t1, 1e-3).unwrap();
        let l1 = sol.density.l1_to_cdf(|x| r1.cdf_1d(x));
        assert!(l1 < 0.02, "L1 {l1}");
    }

    #[test]
    fn shifted_operator_reproduces_later_solution() {
        let c = CoefficientSpec::default_ou().build().unwrap();
        let q0 = DensityGrid::gaussian(-5.0, 5.0, 200, 0.0, 0.2, 0.4).unwrap();
        let gap = shift_relation_gap(&c, &q0, 0.37, 0.5, 1e-3).unwrap();
        assert!(gap < 1e-6, "gap {gap}");
    }

    #[test]
    fn modulated_noise_keeps_mass_and_positivity() {
        let mut spec = CoefficientSpec::default_ou();
        spec.nonlinearity = Nonlinearity::Tanh;
        spec.g = vec![TrigTerm::new(0.5, 1, 0, 0.0)];
        spec.sigma1 = Some(vec![vec![0.4]]);
        spec.f1 = vec![TrigTerm::new(0.3, 0, 1, 0.0)];
        let c = spec.build().unwrap();
        let op = CoefficientOperator::new(&c).unwrap();
        let q0 = DensityGrid::gaussian(-4.0, 4.0, 128, 0.0, 1.0, 0.3).unwrap();
        let sol = fp_solve(&op, &q0, 1.0, 2e-3).unwrap();
        assert!(sol.max_mass_drift < 1e-12);
        assert!(sol.min_value >= 0.0);
        assert!((sol.density.mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn spatial_self_convergence_is_second_order() {
        let solve = |n: usize| {
            let q0 = DensityGrid::gaussian(-8.0, 8.0, n, 0.0, 0.0, 0.5f64.sqrt()).unwrap();
            fp_solve(&heat(), &q0, 0.5, 2e-4).unwrap().density
        };
        let (a, b, c) = (solve(50), solve(100), solve(200));
        let restrict = |fine: &DensityGrid| {
            let v = fine.values();
            let half: Vec<f64> = v.chunks(2).map(|p| 0.5 * (p[0] + p[1])).collect();
            DensityGrid::new(fine.x_lo(), fine.x_hi(), fine.time_fixed(), half).unwrap()
        };
        let e1 = a.l1_distance(&restrict(&b)).unwrap();
        let e2 = b.l1_distance(&restrict(&c)).unwrap();
        let order = (e1 / e2).log2();
        assert!(order >= 1.8, "order {order} ({e1:e}, {e2:e})");
    }

    #[test]
    fn histogram_of_exact_draws_is_close() {
        let law = crate::ou_analytic::GaussianLaw::new(vec![0.5], vec![0.09]).unwrap();
        let mu = law.sample(100_000, 3).unwrap();
        let hist = Histogram::scott(&mu).unwrap();
        let q = DensityGrid::gaussian(-3.0, 4.0, 700, 0.0, 0.5, 0.3).unwrap();
        let l1 = hist.l1_to_density(&q);
        assert!(l1 < 0.03, "L1 {l1}");
        assert!((hist.masses.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn density_csv_has_time_header() {
        let q = DensityGrid::gaussian(-1.0, 1.0, 16, 0.5, 0.0, 0.3).unwrap();
        let mut buf = Vec::new();
        q.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("# time = 0.5\nx,q\n"));
        assert_eq!(s.lines().count(), 18);
    }

    #[test]
    fn cumulative_mass_is_consistent() {
        let q = DensityGrid::gaussian(-2.0, 2.0, 32, 0.0, 0.0, 0.5).unwrap();
        assert_eq!(q.cumulative_mass(-3.0), 0.0);
        assert!((q.cumulative_mass(5.0) - 1.0).abs() < 1e-12);
        assert!((q.cumulative_mass(0.0) - 0.5).abs() < 1e-12);
    }
}
