//! The acceptance suite. Every criterion is a [`Criterion`] strategy in a
//! [`CriterionRegistry`]; running one yields named checks with measured
//! values and the bounds they were held to.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::{norm, CoefficientSpec, QpCoefficients};
use crate::cylinder::{
    birkhoff_average, cylinder_noise_floor, invariance_check, lift_step, mu_bar_grid_stratified, mu_bar_time_average,
    CylinderEnergy, CylinderMeasure, CylinderPoint,
};
use crate::error::{Error, Result};
use crate::flow::{check_shift_identity, contraction_slope, integrate_k};
use crate::fokker_planck::{fp_entrance_residual, shift_relation_gap, DensityGrid, ResidualConfig};
use crate::measures::{estimate_rho, estimate_rho_tilde, pushforward, Sampler};
use crate::noise::NoisePath;
use crate::ou_analytic::{gaussian_gof, ou_rho, torus_average, OuSpec};
use crate::pullback::{pullback_phi, PullbackConfig};
use crate::time::FixedTime;
use crate::transport::{noise_floor, permutation_test, Energy, TransportMetric, W1Sorted};

/// Bound a measured value is held to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum Bound {
    #[serde(rename = "<")]
    Lt { limit: f64 },
    #[serde(rename = "<=")]
    Le { limit: f64 },
    #[serde(rename = ">")]
    Gt { limit: f64 },
    #[serde(rename = ">=")]
    Ge { limit: f64 },
    #[serde(rename = "==")]
    Eq { target: f64 },
    #[serde(rename = "in")]
    Within { lo: f64, hi: f64 },
}

impl Bound {
    pub fn holds(&self, v: f64) -> bool {
        match *self {
            Bound::Lt { limit } => v < limit,
            Bound::Le { limit } => v <= limit,
            Bound::Gt { limit } => v > limit,
            Bound::Ge { limit } => v >= limit,
            Bound::Eq { target } => v == target,
            Bound::Within { lo, hi } => lo <= v && v <= hi,
        }
    }
}

impl std::fmt::Display for Bound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bound::Lt { limit } => write!(f, "< {limit:.4e}"),
            Bound::Le { limit } => write!(f, "<= {limit:.4e}"),
            Bound::Gt { limit } => write!(f, "> {limit:.4e}"),
            Bound::Ge { limit } => write!(f, ">= {limit:.4e}"),
            Bound::Eq { target } => write!(f, "== {target}"),
            Bound::Within { lo, hi } => write!(f, "in [{lo}, {hi}]"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, bound: Bound) -> Self {
        Check {
            name: name.into(),
            passed: bound.holds(value),
            value,
            bound,
        }
    }

    pub fn lt(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::new(name, value, Bound::Lt { limit })
    }

    pub fn le(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::new(name, value, Bound::Le { limit })
    }

    pub fn gt(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::new(name, value, Bound::Gt { limit })
    }

    pub fn ge(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::new(name, value, Bound::Ge { limit })
    }

    pub fn eq(name: impl Into<String>, value: f64, target: f64) -> Self {
        Self::new(name, value, Bound::Eq { target })
    }

    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Self::new(name, value, Bound::Within { lo, hi })
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self::eq(name, if ok { 1.0 } else { 0.0 }, 1.0)
    }
}

/// Shared inputs of a suite run.
#[derive(Clone, Debug)]
pub struct SuiteContext {
    pub coefficients: QpCoefficients,
    pub dt: f64,
    /// Every criterion draws its seeds from its own block above this base.
    pub seed0: u64,
}

impl SuiteContext {
    pub fn new(coefficients: QpCoefficients, dt: f64, seed0: u64) -> Self {
        SuiteContext { coefficients, dt, seed0 }
    }

    /// The default experiment: the bundled O-U spec with `dt = 1e-3`.
    pub fn default_experiment() -> Result<Self> {
        Ok(Self::new(CoefficientSpec::default_ou().build()?, 1e-3, 0))
    }

    fn seeds(&self, id: u32) -> u64 {
        self.seed0 + id as u64 * 1_000_000_000
    }

    fn sampler(&self) -> Result<Sampler<'_>> {
        Sampler::new(&self.coefficients, self.dt)
    }

    fn noise(&self, seed: u64) -> Result<NoisePath> {
        NoisePath::new(seed, self.coefficients.dim(), self.dt)
    }
}

pub trait Criterion: Send + Sync {
    fn id(&self) -> u32;
    fn title(&self) -> &'static str;
    fn budget(&self) -> Duration;
    fn evaluate(&self, ctx: &SuiteContext) -> Result<Vec<Check>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub id: u32,
    pub title: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub runtime_s: f64,
    pub budget_s: f64,
    /// Set when the experiment itself failed; the criterion then fails.
    pub error: Option<String>,
}

impl CriterionReport {
    /// `PASS criterion 3 (pull-back convergence) 0.8 s / 60 s` followed by
    /// one indented line per check.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} criterion {} ({}) {:.1} s / {:.0} s",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.runtime_s,
            self.budget_s
        );
        if let Some(e) = &self.error {
            s.push_str(&format!("\n    error: {e}"));
        }
        for c in &self.checks {
            s.push_str(&format!(
                "\n    {} {} = {:.6e} {}",
                if c.passed { "ok  " } else { "FAIL" },
                c.name,
                c.value,
                c.bound
            ));
        }
        s
    }
}

/// Runs one criterion, timing it against its budget.
pub fn run_criterion(criterion: &dyn Criterion, ctx: &SuiteContext) -> CriterionReport {
    let start = Instant::now();
    let outcome = criterion.evaluate(ctx);
    let runtime = start.elapsed().as_secs_f64();
    let budget = criterion.budget().as_secs_f64();
    let (mut checks, error) = match outcome {
        Ok(c) => (c, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    checks.push(Check::lt("runtime_s", runtime, budget));
    CriterionReport {
        id: criterion.id(),
        title: criterion.title().to_string(),
        passed: error.is_none() && checks.iter().all(|c| c.passed),
        checks,
        runtime_s: runtime,
        budget_s: budget,
        error,
    }
}

#[derive(Clone, Default)]
pub struct CriterionRegistry {
    entries: BTreeMap<u32, Arc<dyn Criterion>>,
}

impl CriterionRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// All nine criteria.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(PathwiseIdentities));
        r.register(Arc::new(ContractionRate));
        r.register(Arc::new(PullbackConvergence));
        r.register(Arc::new(OuLaw));
        r.register(Arc::new(EntranceProperty));
        r.register(Arc::new(QuasiPeriodicity));
        r.register(Arc::new(InvariantMeasure));
        r.register(Arc::new(FokkerPlanck));
        r.register(Arc::new(ConditionAudits));
        r
    }

    pub fn register(&mut self, c: Arc<dyn Criterion>) {
        self.entries.insert(c.id(), c);
    }

    pub fn get(&self, id: u32) -> Result<Arc<dyn Criterion>> {
        self.entries
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::domain(format!("no criterion {id}; known: {:?}", self.ids())))
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.keys().copied().collect()
    }

    /// Runs the selected criteria (all when `ids` is empty) in id order.
    pub fn run(&self, ctx: &SuiteContext, ids: &[u32]) -> Result<SuiteReport> {
        let selected = if ids.is_empty() { self.ids() } else { ids.to_vec() };
        let mut criteria = Vec::with_capacity(selected.len());
        for id in selected {
            criteria.push(run_criterion(self.get(id)?.as_ref(), ctx));
        }
        Ok(SuiteReport {
            passed: criteria.iter().all(|c| c.passed),
            criteria,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub passed: bool,
    pub criteria: Vec<CriterionReport>,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn ulp_gap(a: f64, b: f64) -> f64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs() as f64
}

/// 1. Periodicity, time-shift and cocycle identities, all bitwise.
pub struct PathwiseIdentities;

impl Criterion for PathwiseIdentities {
    fn id(&self) -> u32 {
        1
    }

    fn title(&self) -> &'static str {
        "exact pathwise identities"
    }

    fn budget(&self) -> Duration {
        Duration::from_secs(30)
    }

    fn evaluate(&self, ctx: &SuiteContext) -> Result<Vec<Check>> {
        let c = &ctx.coefficients;
        let d = c.dim();
        let (tau1, tau2) = c.periods();
        let base = ctx.seeds(self.id());
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        let state = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();

        let mut periodic: f64 = 0.0;
        for i in 0..20 {
            let w = ctx.noise(base + i)?;
            let r1 = FixedTime::from_f64(rng.random_range(-5.0..5.0));
            let r2 = FixedTime::from_f64(rng.random_range(-5.0..5.0));
            let s = rng.random_range(-2000..2000);
            let x0 = state(&mut rng);
            let k = integrate_k(c, &w, r1, r2, s, s + 1000, &x0)?;
            for (a1, a2) in [(r1 + tau1, r2), (r1, r2 + tau2), (r1 - tau1 * 3, r2 + tau2 * 2)] {
                periodic = periodic.max(max_abs_diff(&k.values, &integrate_k(c, &w, a1, a2, s, s + 1000, &x0)?.values));
            }
        }

        let mut shift: f64 = 0.0;
        for i in 0..20 {
            let w = ctx.noise(base + 100 + i)?;
            let r1 = rng.random_range(-5.0..5.0);
            let r2 = rng.random_range(-5.0..5.0);
            let m = rng.random_range(-5000..5000);
            let s = rng.random_range(-2000..2000);
            let x0 = state(&mut rng);
            shift = shift.max(check_shift_identity(c, &w, r1, r2, m, s, s + 1000, &x0)?);
        }

        let (mut spatial, mut angles): (f64, f64) = (0.0, 0.0);
        for i in 0..20 {
            let w = ctx.noise(base + 200 + i)?;
            let p = CylinderPoint::new(
                c,
                FixedTime::from_f64(rng.random_range(0.0..tau1.to_f64())),
                FixedTime::from_f64(rng.random_range(0.0..tau2.to_f64())),
                state(&mut rng),
            );
            let m = rng.random_range(0..3000);
            let n = rng.random_range(0..3000);
            let two = lift_step(c, &w.shift(m), &lift_step(c, &w, &p, m)?, n)?;
            let one = lift_step(c, &w, &p, m + n)?;
            spatial = spatial.max(max_abs_diff(&two.x, &one.x));
            angles = angles
                .max(ulp_gap(two.a1.to_f64(), one.a1.to_f64()))
                .max(ulp_gap(two.a2.to_f64(), one.a2.to_f64()));
        }

        Ok(vec![
            Check::eq("k_periodicity_max_dev", periodic, 0.0),
            Check::eq("shift_identity_max_dev", shift, 0.0),
            Check::eq("cocycle_spatial_max_dev", spatial, 0.0),
            Check::le("cocycle_angle_max_ulps", angles, 1.0),
        ])
    }
}

/// 2. Mean fitted decay rate of `|X^{s,x} - X^{s,y}|` over 20 seeds against
/// `α - β²/2`.
pub struct ContractionRate;

impl Criterion for ContractionRate {
    fn id(&self) -> u32 {
        2
    }

    fn title(&self) -> &'static str {
        "contraction rate"
    }

    fn budget(&self) -> Duration {
        Duration::from_secs(60)
    }

    fn evaluate(&self, ctx: &SuiteContext) -> Result<Vec<Check>> {
        let c = &ctx.coefficients;
        let d = c.dim();
        let target = c.audited_constants()?.contraction_rate(2.0);
        let base = ctx.seeds(self.id());
        let horizon = (10.0 / ctx.dt).round() as i64;
        let x: Vec<f64> = vec![5.0; d];
        let y: Vec<f64> = vec![-5.0; d];
        let mut sum = 0.0;
        for i in 0..20 {
            sum += -contraction_slope(c, &ctx.noise(base + i)?, 0, horizon, &x, &y, 0)?;
        }
        let mean = sum / 20.0;
        Ok(vec![
            Check::new("mean_fitted_rate", mean, Bound::Within { lo: 0.9 * target, hi: 1.1 * target }),
            Check::le("relative_error", (mean - target).abs() / target, 0.1),
        ])
    }
}

/// 3. Geometric decay of the pull-back gaps and independence of the limit
/// from the initial point.
pub struct PullbackConvergence;

impl Criterion for PullbackConvergence {
    fn id(&self) -> u32 {
        3
    }

    fn title(&self) -> &'static str {
        "pull-back convergence"
    }

    fn budget(&self) -> Duration {
        Duration::from_secs(60)
    }

    fn evaluate(&self, ctx: &SuiteContext) -> Result<Vec<Check>> {
        let c = &ctx.coefficients;
        let sampler = ctx.sampler()?;
        let cfg: PullbackConfig = sampler.pullback;
        let h = cfg.level_steps as f64 * ctx.dt;
        let w = ctx.noise(ctx.seeds(self.id()))?;
        let mut limits = Vec::new();
        let mut all_converged = true;
        let mut min_fitted = f64::INFINITY;
        let mut min_level_far = f64::INFINITY;
        for i in 0..10 {
            let x0 = -10.0 + 20.0 * i as f64 / 9.0;
            let r = pullback_phi(c, &w, 0, &vec![x0; c.dim()], &cfg)?;
            all_converged &= r.converged;
            if let Some(rate) = r.fitted_rate {
                min_fitted = min_fitted.min((rate * h).exp());
            } else {
                min_fitted = 0.0;
            }
            if i == 9 {
                let gaps = r.gaps();
                for pair in gaps.windows(2) {
                    min_level_far = min_level_far.min(pair[0] / pair[1]);
                }
            }
            limits.push(r.value[0]);
        }
        let spread = limits.iter().copied().fold(f64::NEG_INFINITY, f64::max) - limits.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(vec![
            Check::flag("all_converged", all_converged),
            Check::ge("min_level_factor_from_x0_10", min_level_far, 5.0),
            Check::ge("min_fitted_factor", min_fitted, 5.0),
            Check::le("limit_spread", spread, 2e-6),
        ])
    }
}

/// Five fixed comparison times for criterion 4.
const OU_LAW_TIMES: [f64; 5] = [0.0, 0.3, 0.75, 1.2, 1.9];

/// 4. Pull-back samples of `ρ_t` against the closed-form Gaussian law.
pub struct OuLaw;

impl Criterion for OuLaw {
    fn id(&self) -> u32 {
        4
    }

    fn title(&self) -> &'static str {
        "O-U law"
    }

    fn budget(&self) -> Duration {
        Duration::from_secs(300)
    }

    fn evaluate(&self, ctx: &SuiteContext) -> Result<Vec<Check>> {
        let spec = OuSpec::from_coefficients(&ctx.coefficients)?;
        let sampler = ctx.sampler()?;
        let n = 10_000;
        let base = ctx.seeds(self.id());
        let mut checks = Vec::new();
        for (j, &t) in OU_LAW_TIMES.iter().enumerate() {
            let k = sampler.grid.index_of(t);
            let mu = estimate_rho(&sampler, sampler.grid.time_of(k), n, base + (j * n) as u64)?;
            let gof = gaussian_gof(&mu, &ou_rho(&spec, sampler.grid.time_f64(k))?)?;
            let z = gof.mean_z.iter().map(|z| z.abs()).fold(0.0, f64::max);
            checks.push(Check::lt(format!("t={t}: max_abs_mean_z"), z, 4.0));
            checks.push(Check::lt(format!("t={t}: cov_rel_err"), gof.cov_rel_err, 0.05));
            if let (Some(ks), Some(crit)) = (gof.ks_stat, gof.ks_critical) {
                checks.push(Check::lt(format!("t={t}: ks"), ks, crit));
            }
        }
        Ok(checks)
    }
}

/// 5. `P*(t, s) ρ_s` against `ρ_t` in W1, relative to the noise floor.
pub struct EntranceProperty;

impl Criterion for EntranceProperty {
    fn id(&self) -> u32 {
        5
    }

    fn title(&self) -> &'static str {
        "entrance property"
    }

    fn budget(&self) -> Duration {
        Duration::from_secs(300)
    }

    fn evaluate(&self, ctx: &SuiteContext) -> Result<Vec<Check>> {
        let c = &ctx.coefficients;
        if c.dim() != 1 {
            return Err(Error::domain("the entrance check compares one-dimensional laws"));
        }
        let sampler = ctx.sampler()?;
        let grid = sampler.grid;
        let n = 10_000;
        let base = ctx.seeds(self.id());
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        let metric = W1Sorted;
        let mut checks = Vec::new();
        for pair in 0..5u64 {
            let s = grid.index_of(rng.random_range(0.0..2.0));
            let t = s + grid.index_of(rng.random_range(0.25..2.0));
            let block = base + pair * 10 * n as u64;
            let rho_s = estimate_rho(&sampler, grid.time_of(s), n, block)?;
            let moved = pushforward(c, grid, &rho_s, s, t, block + n as u64)?;
            let rho_t = estimate_rho(&sampler, grid.time_of(t), n, block + 2 * n as u64)?;
            let again = estimate_rho(&sampler, grid.time_of(t), n, block + 3 * n as u64)?;
            let floor = noise_floor(&metric, &rho_t, &again, 200, block)?;
            let dist = metric.distance(&moved, &rho_t)?;
            checks.push(Check::le(
                format!("(s,t)=({:.3},{:.3}): w1 / noise_floor", grid.time_f64(s), grid.time_f64(t)),
                dist / floor.mean,
                2.0,
            ));
        }
        Ok(checks)
    }
}

/// 6. Periodicity of `ρ̃` in each argument.
pub struct QuasiPeriodicity;

impl Criterion for QuasiPeriodicity {
    fn id(&self) -> u32 {
        6
    }

    fn title(&self) -> &'static str {
        "quasi-periodicity of the hull"
    }

    fn budget(&self) -> Duration {
        Duration::from_secs(180)
    }

    fn evaluate(&self, ctx: &SuiteContext) -> Result<Vec<Check>> {
        let c = &ctx.coefficients;
        let sampler = ctx.sampler()?;
        let (tau1, tau2) = c.periods();
        let n = 5_000;
        let base = ctx.seeds(self.id());
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        let t = FixedTime::from_f64(rng.random_range(0.0..tau1.to_f64()));
        let s = FixedTime::from_f64(rng.random_range(0.0..tau2.to_f64()));
        let reference = estimate_rho_tilde(&sampler, t, s, n, base)?;
        let mut checks = Vec::new();
        for (name, (t2, s2), offset) in [("tau1", (t + tau1, s), 1u64), ("tau2", (t, s + tau2), 2)] {
            let shared = estimate_rho_tilde(&sampler, t2, s2, n, base)?;
            checks.push(Check::eq(
                format!("{name}: shared_seed_max_dev"),
                max_abs_diff(reference.samples(), shared.samples()),
                0.0,
            ));
            let fresh = estimate_rho_tilde(&sampler, t2, s2, n, base + offset * n as u64)?;
            let test = permutation_test(&Energy, &reference, &fresh, 1000, 0.01, base + offset)?;
            checks.push(Check::le(format!("{name}: energy_vs_1pct_critical"), test.statistic, test.critical_value));
        }
        Ok(checks)
    }
}

/// 7. `μ̄` two ways, its invariance under the lifted semigroup, and
/// Birkhoff averages.
pub struct InvariantMeasure;

impl Criterion for InvariantMeasure {
    fn id(&self) -> u32 {
        7
    }

    fn title(&self) -> &'static str {
        "invariant measure"
    }

    fn budget(&self) -> Duration {
        Duration::from_secs(600)
    }

    fn evaluate(&self, ctx: &SuiteContext) -> Result<Vec<Check>> {
        let sampler = ctx.sampler()?;
        Ok(InvariantMeasureExperiment::default().run(&sampler, ctx.seeds(self.id()))?.checks)
    }
}

/// The invariant-measure experiment with its sizes exposed: `μ̄` on a
/// stratified grid against its time average, invariance under the lifted
/// semigroup, and Birkhoff averages along one lifted trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantMeasureExperiment {
    pub grid: (usize, usize),
    pub per_cell: usize,
    pub horizon: f64,
    pub invariance_times: Vec<f64>,
    pub birkhoff_horizon: f64,
    pub n_relabel: usize,
}

impl Default for InvariantMeasureExperiment {
    fn default() -> Self {
        InvariantMeasureExperiment {
            grid: (8, 8),
            per_cell: 500,
            horizon: 50.0,
            invariance_times: vec![0.25, 1.0, std::f64::consts::E],
            birkhoff_horizon: 200.0,
            n_relabel: 40,
        }
    }
}

pub struct InvariantMeasureOutcome {
    pub checks: Vec<Check>,
    pub grid_measure: CylinderMeasure,
    pub time_average: CylinderMeasure,
}

impl InvariantMeasureExperiment {
    /// Seeds are drawn from blocks of 10^8 above `base`.
    pub fn run(&self, sampler: &Sampler<'_>, base: u64) -> Result<InvariantMeasureOutcome> {
        let c = sampler.coefficients;
        let grid = sampler.grid;
        let block = 100_000_000;
        let (n1, n2) = self.grid;
        let atoms = n1 * n2 * self.per_cell;
        let mu = mu_bar_grid_stratified(sampler, n1, n2, self.per_cell, base)?;
        let rebuild = mu_bar_grid_stratified(sampler, n1, n2, self.per_cell, base + block)?;
        let averaged = mu_bar_time_average(sampler, self.horizon, atoms, 1, base + 2 * block)?;
        let floor = cylinder_noise_floor(c, &mu, &rebuild, self.n_relabel, base)?;
        let dist = CylinderEnergy::for_coefficients(c).between(&mu, &averaged)?;
        let mut checks = vec![Check::le("grid_vs_time_average / noise_floor", dist / floor.mean, 2.0)];

        for (j, &t) in self.invariance_times.iter().enumerate() {
            let r = invariance_check(c, grid, &mu, &rebuild, grid.index_of(t), base + (3 + j as u64) * block)?;
            checks.push(Check::le(format!("t={t:.4}: invariance dist / noise_floor"), r.dist / r.noise_floor, 2.0));
        }

        let (tau1, tau2) = c.periods();
        let horizon = self.birkhoff_horizon;
        let w = NoisePath::new(base + 6 * block, c.dim(), grid.dt())?;
        let p0 = CylinderPoint::new(c, FixedTime::ZERO, FixedTime::ZERO, vec![0.0; c.dim()]);
        // Space averages from the analytic law when there is one, else from
        // the grid measure itself.
        let (mean_x, mean_x2) = match OuSpec::from_coefficients(c) {
            Ok(spec) => (
                torus_average(&spec, 64, |l| l.mean[0])?,
                torus_average(&spec, 64, |l| l.cov[0] + l.mean[0] * l.mean[0])?,
            ),
            Err(_) => (
                mu.expectation(|_, _, x| x[0]),
                mu.expectation(|_, _, x| x[0] * x[0]),
            ),
        };
        let t1 = tau1.to_f64();
        let observables: [(&str, Box<dyn Fn(f64, f64, &[f64]) -> f64>, f64, f64); 3] = [
            ("x", Box::new(|_, _, x: &[f64]| x[0]), mean_x, 0.0),
            ("x^2", Box::new(|_, _, x: &[f64]| x[0] * x[0]), mean_x2, 0.0),
            // deterministic observable: allow the quadrature error of one
            // partial period on top of the statistical band
            (
                "sin(2 pi a1 / tau1)",
                Box::new(move |a1, _, _: &[f64]| (std::f64::consts::TAU * a1 / t1).sin()),
                0.0,
                t1.max(tau2.to_f64()) / horizon,
            ),
        ];
        for (name, f, target, bias) in observables {
            let b = birkhoff_average(c, &w, &p0, f, horizon)?;
            checks.push(Check::le(
                format!("birkhoff {name}: |avg - target| - 3 stderr - bias"),
                (b.value - target).abs() - 3.0 * b.stderr - bias,
                0.0,
            ));
        }
        Ok(InvariantMeasureOutcome {
            checks,
            grid_measure: mu,
            time_average: averaged,
        })
    }
}

/// 8. Forward-equation solution against pull-back histograms.
pub struct FokkerPlanck;

impl Criterion for FokkerPlanck {
    fn id(&self) -> u32 {
        8
    }

    fn title(&self) -> &'static str {
        "Fokker-Planck correspondence"
    }

    fn budget(&self) -> Duration {
        Duration::from_secs(120)
    }

    fn evaluate(&self, ctx: &SuiteContext) -> Result<Vec<Check>> {
        let c = &ctx.coefficients;
        let sampler = ctx.sampler()?;
        let cfg = ResidualConfig {
            n_samples: 100_000,
            seed0: ctx.seeds(self.id()),
            ..ResidualConfig::default()
        };
        let report = fp_entrance_residual(&sampler, &cfg)?;
        let spec = OuSpec::from_coefficients(c)?;
        let law = ou_rho(&spec, 0.0)?;
        let q0 = DensityGrid::from_cdf(report.domain.0, report.domain.1, cfg.n_cells, FixedTime::ZERO, |x| law.cdf_1d(x))?;
        let gap = shift_relation_gap(c, &q0, FixedTime::from_f64(0.37), FixedTime::from_f64(1.0), cfg.dt_pde)?;
        Ok(vec![
            Check::lt("max_l1_residual", report.max_l1, 0.03),
            Check::lt("max_step_mass_drift", report.max_mass_drift, 1e-12),
            Check::lt("shift_relation_l1", gap, 1e-6),
        ])
    }
}

/// 9. Condition audits on the configured spec and on its anti-dissipative
/// mirror image.
pub struct ConditionAudits;

impl Criterion for ConditionAudits {
    fn id(&self) -> u32 {
        9
    }

    fn title(&self) -> &'static str {
        "condition audits"
    }

    fn budget(&self) -> Duration {
        Duration::from_secs(30)
    }

    fn evaluate(&self, ctx: &SuiteContext) -> Result<Vec<Check>> {
        let c = &ctx.coefficients;
        let seed = ctx.seeds(self.id());
        let (n, radius) = (20_000, 10.0);
        let dis = c.check_dissipativity(n, radius, seed)?;
        let lip = c.check_lipschitz_and_bounds(n, radius, seed)?;
        let alpha = c.lambda_min();
        let m_bound = c.forcing().iter().map(|f| f.amplitude_bound()).sum::<f64>() + norm(c.sigma0());

        let mut mirror = c.spec().clone();
        for row in mirror.a.iter_mut() {
            for v in row.iter_mut() {
                *v = -*v;
            }
        }
        mirror.declared.alpha = -mirror.declared.alpha;
        let bad = mirror.build()?;
        let first = bad.check_dissipativity(n, radius, seed)?;
        let second = bad.check_dissipativity(n, radius, seed)?;
        let w = &first.worst;
        let b = |x: &[f64]| bad.eval_drift(w.t1, w.t2, x);
        let (bx, by) = (b(&w.x)?, b(&w.y)?);
        let inner: f64 = (0..w.x.len()).map(|i| (w.x[i] - w.y[i]) * (bx[i] - by[i])).sum();
        let witnessed = inner > 0.0;

        Ok(vec![
            Check::within("alpha_hat", dis.alpha_hat, alpha - 1e-6, alpha),
            Check::eq("beta_hat", lip.beta_hat, 0.0),
            Check::le("m_hat", lip.m_hat, m_bound),
            Check::lt("anti_dissipative_alpha_hat", first.alpha_hat, 0.0),
            Check::flag("anti_dissipative_witness_expands", witnessed),
            Check::flag("witness_reproducible", first.worst == second.worst),
        ])
    }
}
