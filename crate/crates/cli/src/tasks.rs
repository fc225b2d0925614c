//! Subcommands. Each is a [`Task`] strategy in a [`TaskRegistry`] keyed by
//! its subcommand name.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use qpsde::acceptance::{Check, CriterionRegistry, InvariantMeasureExperiment, SuiteContext};
use qpsde::cylinder::{lift_step, CylinderPoint};
use qpsde::flow::integrate_k;
use qpsde::fokker_planck::{fp_entrance_residual, shift_relation_gap, DensityGrid};
use qpsde::measures::{estimate_rho, estimate_rho_tilde, EmpiricalMeasure, Sampler};
use qpsde::ou_analytic::{gaussian_gof, ou_rho, ou_rho_tilde, torus_average, OuSpec};
use qpsde::pullback::{pullback_phi, pullback_phi_tilde, PullbackConfig};
use qpsde::transport::{noise_floor, MetricRegistry};
use qpsde::{FixedTime, NoisePath, QpCoefficients};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, MeasureKind};
use crate::output::Artifacts;

pub struct TaskContext<'a> {
    pub config: &'a ExperimentConfig,
    pub coefficients: &'a QpCoefficients,
    pub out: &'a mut Artifacts,
}

impl<'a> TaskContext<'a> {
    fn sampler(&self) -> Result<Sampler<'a>> {
        let run = &self.config.run;
        let s = Sampler::new(self.coefficients, run.dt)?;
        let cfg = s.pullback.with_tol(run.pullback_tol).with_max_levels(run.max_levels);
        Ok(s.with_config(cfg))
    }

    fn pullback_config(&self) -> Result<PullbackConfig> {
        Ok(self.sampler()?.pullback)
    }

    fn noise(&self, seed: u64) -> Result<NoisePath> {
        Ok(NoisePath::new(seed, self.coefficients.dim(), self.config.run.dt)?)
    }

    fn x0(&self, given: &[f64]) -> Result<Vec<f64>> {
        let d = self.coefficients.dim();
        match given.len() {
            0 => Ok(vec![0.0; d]),
            n if n == d => Ok(given.to_vec()),
            n => bail!("x0 has {n} components, the model has dimension {d}"),
        }
    }
}

#[derive(Debug, Default)]
pub struct TaskOutcome {
    pub checks: Vec<Check>,
    pub details: Value,
    /// First and last seed drawn, inclusive.
    pub seed_range: Option<(u64, u64)>,
}

pub trait Task: Send + Sync {
    fn name(&self) -> &'static str;
    fn about(&self) -> &'static str;
    fn run(&self, ctx: &mut TaskContext<'_>) -> Result<TaskOutcome>;
}

#[derive(Clone, Default)]
pub struct TaskRegistry {
    entries: BTreeMap<&'static str, Arc<dyn Task>>,
}

impl TaskRegistry {
    pub fn standard() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(Validate));
        r.register(Arc::new(Simulate));
        r.register(Arc::new(Pullback));
        r.register(Arc::new(Measure));
        r.register(Arc::new(Lift));
        r.register(Arc::new(FokkerPlanck));
        r.register(Arc::new(Oracle));
        r.register(Arc::new(Acceptance));
        r
    }

    pub fn register(&mut self, t: Arc<dyn Task>) {
        self.entries.insert(t.name(), t);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn Task>> {
        self.entries.get(name).cloned()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<dyn Task>> {
        self.entries.values()
    }
}

fn seeds(first: u64, n: usize) -> Option<(u64, u64)> {
    (n > 0).then(|| (first, first + n as u64 - 1))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub struct Validate;

impl Task for Validate {
    fn name(&self) -> &'static str {
        "validate"
    }

    fn about(&self) -> &'static str {
        "audit dissipativity, Lipschitz and growth constants"
    }

    fn run(&self, ctx: &mut TaskContext<'_>) -> Result<TaskOutcome> {
        let c = ctx.coefficients;
        let v = &ctx.config.validate;
        let seed = ctx.config.run.seed;
        let dis = c.check_dissipativity(v.n_samples, v.box_radius, seed)?;
        let lip = c.check_lipschitz_and_bounds(v.n_samples, v.box_radius, seed)?;
        let audited = c.audited_constants()?;
        let rate = audited.contraction_rate(2.0);
        let details = json!({
            "dissipativity": dis,
            "lipschitz": lip,
            "audited": audited,
            "contraction_rate_p2": rate,
            "second_moment_bound": audited.second_moment_bound(),
        });
        ctx.out.json("audit.json", &details)?;
        if !dis.passed {
            let w = &dis.worst;
            eprintln!(
                "dissipativity fails: alpha_hat = {:e}; witness t1 = {}, t2 = {}, x = {:?}, y = {:?}",
                dis.alpha_hat, w.t1, w.t2, w.x, w.y
            );
        }
        Ok(TaskOutcome {
            checks: vec![
                Check::flag("dissipativity", dis.passed),
                Check::flag("lipschitz_and_bounds", lip.passed),
                Check::gt("contraction_rate_p2", rate, 0.0),
            ],
            details,
            seed_range: None,
        })
    }
}

pub struct Simulate;

impl Task for Simulate {
    fn name(&self) -> &'static str {
        "simulate"
    }

    fn about(&self) -> &'static str {
        "integrate trajectories of the reparameterised flow"
    }

    fn run(&self, ctx: &mut TaskContext<'_>) -> Result<TaskOutcome> {
        let c = ctx.coefficients;
        let s = &ctx.config.simulate;
        let run = &ctx.config.run;
        let x0 = ctx.x0(&s.x0)?;
        let r1 = FixedTime::try_from_f64(s.r1).context("simulate.r1 is not finite")?;
        let r2 = FixedTime::try_from_f64(s.r2).context("simulate.r2 is not finite")?;
        let mut finals = Vec::with_capacity(s.n_paths);
        for i in 0..s.n_paths {
            let seed = run.seed + i as u64;
            let w = ctx.noise(seed)?;
            let grid = w.grid();
            let traj = integrate_k(c, &w, r1, r2, grid.index_of(s.t_start), grid.index_of(s.t_end), &x0)?;
            traj.write_csv(ctx.out.file(&format!("trajectory_{seed}.csv"))?)?;
            finals.push(json!({ "seed": seed, "final": traj.last() }));
        }
        Ok(TaskOutcome {
            checks: vec![Check::ge("n_paths", s.n_paths as f64, 1.0)],
            details: json!({ "paths": finals }),
            seed_range: seeds(run.seed, s.n_paths),
        })
    }
}

pub struct Pullback;

impl Task for Pullback {
    fn name(&self) -> &'static str {
        "pullback"
    }

    fn about(&self) -> &'static str {
        "pull back phi(t) or the hull phi~(t, s) with convergence history"
    }

    fn run(&self, ctx: &mut TaskContext<'_>) -> Result<TaskOutcome> {
        let c = ctx.coefficients;
        let p = &ctx.config.pullback;
        let run = &ctx.config.run;
        let cfg = ctx.pullback_config()?;
        let x0 = ctx.x0(&p.x0)?;
        let mut summary = ctx.out.file("pullback.csv")?;
        write!(summary, "seed,converged,levels,last_gap")?;
        for j in 1..=c.dim() {
            write!(summary, ",x_{j}")?;
        }
        writeln!(summary)?;
        let (mut converged, mut worst_gap) = (0usize, 0.0f64);
        for i in 0..p.n_paths {
            let seed = run.seed + i as u64;
            let w = ctx.noise(seed)?;
            let r = match p.hull {
                Some((t, s)) => pullback_phi_tilde(c, &w, FixedTime::from_f64(t), FixedTime::from_f64(s), &x0, &cfg)?,
                None => pullback_phi(c, &w, w.grid().index_of(p.t), &x0, &cfg)?,
            };
            r.write_levels_csv(ctx.out.file(&format!("levels_{seed}.csv"))?)?;
            let gap = r.last_gap().unwrap_or(f64::INFINITY);
            converged += r.converged as usize;
            worst_gap = worst_gap.max(gap);
            write!(summary, "{seed},{},{},{gap:e}", r.converged, r.levels.len())?;
            for v in &r.value {
                write!(summary, ",{v}")?;
            }
            writeln!(summary)?;
        }
        summary.flush()?;
        Ok(TaskOutcome {
            checks: vec![
                Check::eq("non_converged", (p.n_paths - converged) as f64, 0.0),
                Check::le("max_last_gap", worst_gap, cfg.tol),
            ],
            details: json!({ "level_steps": cfg.level_steps, "tol": cfg.tol, "rate": cfg.rate }),
            seed_range: seeds(run.seed, p.n_paths),
        })
    }
}

pub struct Measure;

impl Task for Measure {
    fn name(&self) -> &'static str {
        "measure"
    }

    fn about(&self) -> &'static str {
        "estimate rho_t or rho~_{t,s}, distances and noise floor"
    }

    fn run(&self, ctx: &mut TaskContext<'_>) -> Result<TaskOutcome> {
        let c = ctx.coefficients;
        let m = &ctx.config.measure;
        let run = &ctx.config.run;
        let n = run.n_samples;
        if m.times.is_empty() {
            bail!("measure.times is empty");
        }
        let metric = MetricRegistry::standard().get(&m.metric)?;
        let sampler = ctx.sampler()?;
        let oracle = OuSpec::from_coefficients(c).ok();
        let estimate = |t: f64, seed0: u64| -> Result<EmpiricalMeasure> {
            Ok(match m.kind {
                MeasureKind::Rho => estimate_rho(&sampler, t, n, seed0)?,
                MeasureKind::RhoTilde => estimate_rho_tilde(&sampler, t, m.s_param, n, seed0)?,
            })
        };

        let mut checks = Vec::new();
        let mut measures = Vec::with_capacity(m.times.len());
        let mut gof = Vec::new();
        for (i, &t) in m.times.iter().enumerate() {
            let mu = estimate(t, run.seed + (i * n) as u64)?;
            mu.save(ctx.out.dir(), &format!("measure_{i}"))?;
            ctx.out.record(&format!("measure_{i}.csv"));
            ctx.out.record(&format!("measure_{i}.json"));
            if let Some(spec) = &oracle {
                let law = match m.kind {
                    MeasureKind::Rho => ou_rho(spec, t)?,
                    MeasureKind::RhoTilde => ou_rho_tilde(spec, t, m.s_param)?,
                };
                let r = gaussian_gof(&mu, &law)?;
                let z = r.mean_z.iter().fold(0.0f64, |a, z| a.max(z.abs()));
                checks.push(Check::lt(format!("t={t}: max |mean z|"), z, 4.0));
                checks.push(Check::lt(format!("t={t}: covariance rel err"), r.cov_rel_err, 0.05));
                if let (Some(ks), Some(crit)) = (r.ks_stat, r.ks_critical) {
                    checks.push(Check::lt(format!("t={t}: ks"), ks, crit));
                }
                gof.push(json!({ "t": t, "report": r }));
            }
            measures.push(mu);
        }

        let rebuild = estimate(m.times[0], run.seed + (m.times.len() * n) as u64)?;
        let floor = noise_floor(metric.as_ref(), &measures[0], &rebuild, m.n_relabel, run.seed)?;
        let mut out = ctx.out.file("distances.csv")?;
        writeln!(out, "t_a,t_b,metric,distance,noise_floor")?;
        for (t, mu) in m.times.iter().zip(&measures) {
            let d = metric.distance(&measures[0], mu)?;
            writeln!(out, "{},{t},{},{d:e},{:e}", m.times[0], m.metric, floor.mean)?;
        }
        out.flush()?;
        checks.push(Check::ge("noise_floor", floor.mean, 0.0));
        Ok(TaskOutcome {
            checks,
            details: json!({ "noise_floor": floor.mean, "noise_floor_sd": floor.std_dev, "gof": gof }),
            seed_range: seeds(run.seed, (m.times.len() + 1) * n),
        })
    }
}

pub struct Lift;

impl Task for Lift {
    fn name(&self) -> &'static str {
        "lift"
    }

    fn about(&self) -> &'static str {
        "cocycle checks, mu-bar on the grid and as a time average, invariance, Birkhoff averages"
    }

    fn run(&self, ctx: &mut TaskContext<'_>) -> Result<TaskOutcome> {
        let c = ctx.coefficients;
        let l = &ctx.config.lift;
        let run = &ctx.config.run;
        let (tau1, tau2) = (c.tau1(), c.tau2());
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        let (mut spatial, mut angles) = (0.0f64, 0.0f64);
        for i in 0..l.cocycle_checks {
            let w = ctx.noise(run.seed + i as u64)?;
            let x: Vec<f64> = (0..c.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = CylinderPoint::new(
                c,
                FixedTime::from_f64(rng.random_range(0.0..tau1)),
                FixedTime::from_f64(rng.random_range(0.0..tau2)),
                x,
            );
            let (m, n) = (rng.random_range(0..3000), rng.random_range(0..3000));
            let two = lift_step(c, &w.shift(m), &lift_step(c, &w, &p, m)?, n)?;
            let one = lift_step(c, &w, &p, m + n)?;
            spatial = spatial.max(max_abs_diff(&two.x, &one.x));
            for (a, b) in [(two.a1, one.a1), (two.a2, one.a2)] {
                let ulps = (a.to_f64().to_bits() as i64 - b.to_f64().to_bits() as i64).unsigned_abs();
                angles = angles.max(ulps as f64);
            }
        }
        let mut checks = vec![
            Check::eq("cocycle_spatial_max_dev", spatial, 0.0),
            Check::le("cocycle_angle_max_ulps", angles, 1.0),
        ];

        let experiment = InvariantMeasureExperiment {
            grid: l.grid,
            per_cell: l.per_cell,
            horizon: l.horizon,
            invariance_times: l.invariance_times.clone(),
            birkhoff_horizon: l.birkhoff_horizon,
            n_relabel: l.n_relabel,
        };
        let base = run.seed + 1_000_000_000;
        let outcome = experiment.run(&ctx.sampler()?, base)?;
        outcome.grid_measure.write_csv(ctx.out.file("mu_bar_grid.csv")?)?;
        outcome.time_average.write_csv(ctx.out.file("mu_bar_time_average.csv")?)?;
        checks.extend(outcome.checks);
        // seeds: cocycle paths, then blocks of 1e8 above `base` for the
        // measures, the invariance pushes and the Birkhoff path
        let blocks = 6 + 1;
        Ok(TaskOutcome {
            checks,
            details: json!({ "experiment": experiment }),
            seed_range: Some((run.seed, base + blocks * 100_000_000 - 1)),
        })
    }
}

pub struct FokkerPlanck;

impl Task for FokkerPlanck {
    fn name(&self) -> &'static str {
        "fokker-planck"
    }

    fn about(&self) -> &'static str {
        "forward-equation residuals against pull-back histograms"
    }

    fn run(&self, ctx: &mut TaskContext<'_>) -> Result<TaskOutcome> {
        let c = ctx.coefficients;
        let f = &ctx.config.fokker_planck;
        let cfg = f.residual_config(&ctx.config.run);
        let report = fp_entrance_residual(&ctx.sampler()?, &cfg)?;
        report.write_json(ctx.out.file("residuals.json")?)?;
        let mut checks = vec![
            Check::lt("max_l1_residual", report.max_l1, f.max_l1),
            Check::lt("max_step_mass_drift", report.max_mass_drift, 1e-12),
        ];
        if let Ok(spec) = OuSpec::from_coefficients(c) {
            let law = ou_rho(&spec, cfg.nodes[0])?;
            let q0 = DensityGrid::from_cdf(report.domain.0, report.domain.1, cfg.n_cells, FixedTime::from_f64(cfg.nodes[0]), |x| {
                law.cdf_1d(x)
            })?;
            let span = FixedTime::from_f64(cfg.nodes[cfg.nodes.len() - 1] - cfg.nodes[0]);
            let gap = shift_relation_gap(c, &q0, FixedTime::from_f64(f.shift), span, cfg.dt_pde)?;
            checks.push(Check::lt("shift_relation_l1", gap, 1e-6));
        }
        Ok(TaskOutcome {
            checks,
            details: serde_json::to_value(&report)?,
            seed_range: seeds(cfg.seed0, cfg.n_samples),
        })
    }
}

pub struct Oracle;

impl Task for Oracle {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn about(&self) -> &'static str {
        "analytic Ornstein-Uhlenbeck tables of rho_t and rho~_{t,s}"
    }

    fn run(&self, ctx: &mut TaskContext<'_>) -> Result<TaskOutcome> {
        let c = ctx.coefficients;
        let o = &ctx.config.oracle;
        let spec = OuSpec::from_coefficients(c)?;
        let d = c.dim();
        let header = |out: &mut dyn Write, lead: &str| -> std::io::Result<()> {
            write!(out, "{lead}")?;
            for i in 1..=d {
                write!(out, ",mean_{i}")?;
            }
            for i in 1..=d {
                for j in 1..=d {
                    write!(out, ",cov_{i}{j}")?;
                }
            }
            writeln!(out)
        };
        let row = |out: &mut dyn Write, lead: String, mean: &[f64], cov: &[f64]| -> std::io::Result<()> {
            write!(out, "{lead}")?;
            for v in mean.iter().chain(cov) {
                write!(out, ",{v}")?;
            }
            writeln!(out)
        };

        let mut out = ctx.out.file("oracle_rho.csv")?;
        header(&mut out, "t")?;
        let mut diagonal: f64 = 0.0;
        for &t in &o.times {
            let law = ou_rho(&spec, t)?;
            let hull = ou_rho_tilde(&spec, t, t)?;
            diagonal = diagonal.max(max_abs_diff(&law.mean, &hull.mean)).max(max_abs_diff(&law.cov, &hull.cov));
            row(&mut out, t.to_string(), &law.mean, &law.cov)?;
        }
        out.flush()?;

        let n = o.hull_grid.max(1);
        let (tau1, tau2) = (c.tau1(), c.tau2());
        let mut out = ctx.out.file("oracle_rho_tilde.csv")?;
        header(&mut out, "t,s")?;
        let mut periodic: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let (t, s) = (tau1 * i as f64 / n as f64, tau2 * j as f64 / n as f64);
                let law = ou_rho_tilde(&spec, t, s)?;
                let shifted = ou_rho_tilde(&spec, t + tau1, s + tau2)?;
                periodic = periodic.max(max_abs_diff(&law.mean, &shifted.mean));
                row(&mut out, format!("{t},{s}"), &law.mean, &law.cov)?;
            }
        }
        out.flush()?;

        let mean = torus_average(&spec, 64, |l| l.mean[0])?;
        let second = torus_average(&spec, 64, |l| l.cov[0] + l.mean[0] * l.mean[0])?;
        Ok(TaskOutcome {
            checks: vec![
                Check::lt("diagonal_vs_rho max dev", diagonal, 1e-9),
                Check::lt("hull periodicity max dev", periodic, 1e-9),
            ],
            details: json!({ "mu_bar_mean_x1": mean, "mu_bar_second_moment_x1": second }),
            seed_range: None,
        })
    }
}

pub struct Acceptance;

impl Task for Acceptance {
    fn name(&self) -> &'static str {
        "acceptance"
    }

    fn about(&self) -> &'static str {
        "the nine acceptance criteria"
    }

    fn run(&self, ctx: &mut TaskContext<'_>) -> Result<TaskOutcome> {
        let run = &ctx.config.run;
        let suite = SuiteContext::new(ctx.coefficients.clone(), run.dt, run.seed);
        let registry = CriterionRegistry::standard();
        let ids = &ctx.config.acceptance.criteria;
        let mut criteria = Vec::new();
        let selected = if ids.is_empty() { registry.ids() } else { ids.clone() };
        for id in selected {
            let report = registry.run(&suite, &[id])?.criteria.remove(0);
            eprintln!("{}", report.summary());
            criteria.push(report);
        }
        let mut checks = Vec::new();
        for r in &criteria {
            if let Some(e) = &r.error {
                checks.push(Check::flag(format!("criterion {}: {e}", r.id), false));
            }
            for ch in &r.checks {
                let mut ch = ch.clone();
                ch.name = format!("criterion {}: {}", r.id, ch.name);
                checks.push(ch);
            }
        }
        let last = criteria.iter().map(|r| r.id).max().unwrap_or(0);
        Ok(TaskOutcome {
            checks,
            details: json!({ "criteria": criteria }),
            seed_range: Some((run.seed, run.seed + (last as u64 + 1) * 1_000_000_000 - 1)),
        })
    }
}
