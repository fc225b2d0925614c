//! Exact Gaussian laws of the quasi-periodic Ornstein–Uhlenbeck process
//! `dX = (S(t) - A X) dt + σ(t) dW`.
//!
//! With `A = Q Λ Qᵀ` the hull law `ρ̃_{t,s}` has
//!
//! ```text
//! mean = ∫_0^∞ e^{-uA} S̃(t-u, s-u) du
//! cov  = ∫_0^∞ e^{-uA} (σ̃σ̃ᵀ)(t-u, s-u) e^{-uA} du
//! ```
//!
//! and `ρ_t = ρ̃_{t,t}`. Two independent evaluations are provided: composite
//! Gauss–Legendre quadrature over a truncated half-line, and a closed form
//! built from `∫_0^∞ e^{-λu} sin(θ - ωu) du = (λ sin θ - ω cos θ)/(λ² + ω²)`.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::coefficients::{Nonlinearity, QpCoefficients, TrigSum, TrigTerm};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::noise::standard_normal;

/// Truncation depth of the half-line integrals in units of `1/λ_min`.
const DEPTH: f64 = 40.0;
const GL_ORDER: usize = 10;

#[derive(Clone, Debug)]
pub struct OuSpec {
    dim: usize,
    forcing: Vec<TrigSum>,
    sigma0: DMatrix<f64>,
    /// Optional modulation `σ̃ = Σ0 + g(t1,t2) Σ1`.
    modulation: TrigSum,
    sigma1: DMatrix<f64>,
    tau1: f64,
    tau2: f64,
    eig: SymmetricEigen<f64, nalgebra::Dyn>,
}

impl OuSpec {
    /// `a` and `sigma0` are row-major `d×d`; `forcing[i]` is the `i`-th
    /// component of `S̃`.
    pub fn new(dim: usize, a: &[f64], forcing: Vec<TrigSum>, sigma0: &[f64], tau1: f64, tau2: f64) -> Result<Self> {
        if dim == 0 || a.len() != dim * dim || sigma0.len() != dim * dim || forcing.len() != dim {
            return Err(Error::domain("inconsistent dimensions in O-U specification"));
        }
        if !(tau1 > 0.0 && tau2 > 0.0 && tau1.is_finite() && tau2.is_finite()) {
            return Err(Error::domain("periods must be positive"));
        }
        let a = DMatrix::from_row_slice(dim, dim, a);
        if (&a - a.transpose()).amax() > 1e-12 * a.amax().max(1.0) {
            return Err(Error::domain("drift matrix must be symmetric"));
        }
        let eig = SymmetricEigen::new(a.clone());
        if eig.eigenvalues.min() <= 0.0 {
            return Err(Error::domain(format!(
                "drift matrix must be positive definite (smallest eigenvalue {})",
                eig.eigenvalues.min()
            )));
        }
        Ok(OuSpec {
            dim,
            forcing,
            sigma0: DMatrix::from_row_slice(dim, dim, sigma0),
            modulation: TrigSum::zero(),
            sigma1: DMatrix::zeros(dim, dim),
            tau1,
            tau2,
            eig,
        })
    }

    pub fn with_modulation(mut self, g: TrigSum, sigma1: &[f64]) -> Result<Self> {
        if sigma1.len() != self.dim * self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim * self.dim,
                found: sigma1.len(),
            });
        }
        self.modulation = g;
        self.sigma1 = DMatrix::from_row_slice(self.dim, self.dim, sigma1);
        Ok(self)
    }

    /// The O-U special case of a coefficient set: no state-dependent terms.
    pub fn from_coefficients(c: &QpCoefficients) -> Result<Self> {
        let linear = c.nonlinearity() == Nonlinearity::None || (c.f1().is_zero() && c.g().is_zero());
        if !linear {
            return Err(Error::domain(
                "analytic law needs linear drift and additive noise (nonlinearity = none)",
            ));
        }
        Self::new(c.dim(), c.matrix_a(), c.forcing().to_vec(), c.sigma0(), c.tau1(), c.tau2())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn periods(&self) -> (f64, f64) {
        (self.tau1, self.tau2)
    }

    pub fn lambda_min(&self) -> f64 {
        self.eig.eigenvalues.min()
    }

    fn turns(&self, t1: f64, t2: f64) -> (f64, f64) {
        ((t1 / self.tau1).rem_euclid(1.0), (t2 / self.tau2).rem_euclid(1.0))
    }

    pub fn forcing_at(&self, t1: f64, t2: f64) -> DVector<f64> {
        let (u1, u2) = self.turns(t1, t2);
        DVector::from_iterator(self.dim, self.forcing.iter().map(|s| s.eval_turns(u1, u2)))
    }

    pub fn sigma_at(&self, t1: f64, t2: f64) -> DMatrix<f64> {
        let (u1, u2) = self.turns(t1, t2);
        &self.sigma0 + &self.sigma1 * self.modulation.eval_turns(u1, u2)
    }

    /// Largest angular frequency in the diagonal variable among all terms.
    fn fastest_frequency(&self) -> f64 {
        self.forcing
            .iter()
            .chain(std::iter::once(&self.modulation))
            .flat_map(|s| s.terms.iter())
            .map(|t| t.omega(self.tau1, self.tau2).abs())
            .fold(0.0, f64::max)
    }

    fn from_eigenbasis_vec(&self, v: DVector<f64>) -> Vec<f64> {
        (&self.eig.eigenvectors * v).iter().copied().collect()
    }

    fn from_eigenbasis_mat(&self, m: DMatrix<f64>) -> Vec<f64> {
        let q = &self.eig.eigenvectors;
        let c = q * m * q.transpose();
        let c = (&c + c.transpose()) * 0.5;
        c.transpose().iter().copied().collect()
    }
}

/// Mean and covariance of a Gaussian on `R^d`; `cov` is row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLaw {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl GaussianLaw {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                found: cov.len(),
            });
        }
        let m = DMatrix::from_row_slice(d, d, &cov);
        if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
            return Err(Error::Numeric("covariance is not symmetric".into()));
        }
        if d > 0 && SymmetricEigen::new(m).eigenvalues.min() < -1e-12 {
            return Err(Error::Numeric("covariance is not positive semidefinite".into()));
        }
        Ok(GaussianLaw { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.cov[i * self.dim() + i]
    }

    /// Density in one dimension.
    pub fn pdf_1d(&self, x: f64) -> f64 {
        let (m, v) = (self.mean[0], self.cov[0]);
        (-(x - m) * (x - m) / (2.0 * v)).exp() / (TAU * v).sqrt()
    }

    /// Distribution function in one dimension.
    pub fn cdf_1d(&self, x: f64) -> f64 {
        let sd = self.cov[0].sqrt();
        if sd == 0.0 {
            return if x >= self.mean[0] { 1.0 } else { 0.0 };
        }
        Normal::new(self.mean[0], sd).map(|n| n.cdf(x)).unwrap_or(f64::NAN)
    }

    /// `n` exact draws using the counter-based normals of `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<EmpiricalMeasure> {
        let d = self.dim();
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &self.cov));
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        let mut samples = Vec::with_capacity(n * d);
        for i in 0..n {
            let z = DVector::from_iterator(d, (0..d).map(|j| standard_normal(seed, i as i64, j as u64)));
            let x = &root * z;
            samples.extend(x.iter().zip(&self.mean).map(|(a, m)| a + m));
        }
        EmpiricalMeasure::uniform(d, samples)
    }
}

/// Panels per fastest-scale width; 1 is the default resolution.
#[derive(Clone, Copy, Debug)]
pub struct Quadrature {
    pub refinement: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature { refinement: 1 }
    }
}

/// `ρ̃_{t,s}` by composite Gauss–Legendre quadrature. The result is checked
/// against a run with doubled resolution.
pub fn ou_rho_tilde(spec: &OuSpec, t: f64, s: f64) -> Result<GaussianLaw> {
    let coarse = ou_rho_tilde_with(spec, t, s, Quadrature { refinement: 1 })?;
    let fine = ou_rho_tilde_with(spec, t, s, Quadrature { refinement: 2 })?;
    let scale = fine.mean.iter().chain(&fine.cov).fold(1.0f64, |m, v| m.max(v.abs()));
    let diff = coarse
        .mean
        .iter()
        .chain(&coarse.cov)
        .zip(fine.mean.iter().chain(&fine.cov))
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if diff > 1e-9 * scale {
        return Err(Error::Numeric(format!("quadrature did not settle (change {diff:e})")));
    }
    Ok(fine)
}

/// `ρ_t = ρ̃_{t,t}`.
pub fn ou_rho(spec: &OuSpec, t: f64) -> Result<GaussianLaw> {
    ou_rho_tilde(spec, t, t)
}

pub fn ou_rho_tilde_with(spec: &OuSpec, t: f64, s: f64, rule: Quadrature) -> Result<GaussianLaw> {
    if !(t.is_finite() && s.is_finite()) {
        return Err(Error::domain("non-finite time"));
    }
    let d = spec.dim;
    let lam = &spec.eig.eigenvalues;
    let q = &spec.eig.eigenvectors;
    let depth = DEPTH / spec.lambda_min();
    let mut width = (spec.tau1.min(spec.tau2) / 8.0).min(1.0 / lam.max());
    let omega = spec.fastest_frequency();
    if omega > 0.0 {
        width = width.min(TAU / omega / 8.0);
    }
    width /= rule.refinement.max(1) as f64;
    let panels = (depth / width).ceil() as usize;
    let gl = GaussLegendre::new(NonZeroUsize::new(GL_ORDER).unwrap());

    let mut mean = DVector::<f64>::zeros(d);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut decay = DVector::<f64>::zeros(d);
    for p in 0..panels {
        let a = p as f64 * width;
        let half = 0.5 * width;
        for (node, weight) in gl.as_node_weight_pairs() {
            let u = a + half * (node + 1.0);
            let w = half * weight;
            for k in 0..d {
                decay[k] = (-lam[k] * u).exp();
            }
            let f = q.transpose() * spec.forcing_at(t - u, s - u);
            mean += f.component_mul(&decay) * w;
            let sig = spec.sigma_at(t - u, s - u);
            let m = q.transpose() * &sig * sig.transpose() * q;
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += w * decay[i] * decay[j] * m[(i, j)];
                }
            }
        }
    }
    GaussianLaw::new(spec.from_eigenbasis_vec(mean), spec.from_eigenbasis_mat(cov))
}

/// `∫_0^∞ e^{-λu} sin(θ - ωu) du`.
fn laplace_sin(lambda: f64, theta: f64, omega: f64) -> f64 {
    (lambda * theta.sin() - omega * theta.cos()) / (lambda * lambda + omega * omega)
}

/// A term evaluated along `(t - u, s - u)` is `amp sin(θ - ωu)`.
fn phase_and_frequency(term: &TrigTerm, t: f64, s: f64, tau1: f64, tau2: f64) -> (f64, f64) {
    let turns = term.n1 as f64 * (t / tau1).rem_euclid(1.0) + term.n2 as f64 * (s / tau2).rem_euclid(1.0);
    (TAU * turns.fract() + term.phase, term.omega(tau1, tau2))
}

/// `∫_0^∞ e^{-λu} g(t-u, s-u) du` for a trig sum `g`.
fn laplace_sum(g: &TrigSum, lambda: f64, t: f64, s: f64, tau1: f64, tau2: f64) -> f64 {
    g.terms
        .iter()
        .map(|term| {
            let (th, om) = phase_and_frequency(term, t, s, tau1, tau2);
            term.amplitude * laplace_sin(lambda, th, om)
        })
        .sum()
}

/// `∫_0^∞ e^{-λu} g(t-u, s-u)^2 du` via `sin a sin b = (cos(a-b) - cos(a+b))/2`.
fn laplace_square(g: &TrigSum, lambda: f64, t: f64, s: f64, tau1: f64, tau2: f64) -> f64 {
    let parts: Vec<(f64, f64, f64)> = g
        .terms
        .iter()
        .map(|term| {
            let (th, om) = phase_and_frequency(term, t, s, tau1, tau2);
            (term.amplitude, th, om)
        })
        .collect();
    let mut acc = 0.0;
    for &(ak, tk, ok) in &parts {
        for &(al, tl, ol) in &parts {
            let diff = laplace_sin(lambda, tk - tl + FRAC_PI_2, ok - ol);
            let sum = laplace_sin(lambda, tk + tl + FRAC_PI_2, ok + ol);
            acc += 0.5 * ak * al * (diff - sum);
        }
    }
    acc
}

/// `ρ̃_{t,s}` in closed form.
pub fn ou_rho_tilde_closed(spec: &OuSpec, t: f64, s: f64) -> Result<GaussianLaw> {
    let d = spec.dim;
    let lam = &spec.eig.eigenvalues;
    let q = &spec.eig.eigenvectors;
    let (tau1, tau2) = (spec.tau1, spec.tau2);

    let mut mean = DVector::<f64>::zeros(d);
    for k in 0..d {
        for i in 0..d {
            mean[k] += q[(i, k)] * laplace_sum(&spec.forcing[i], lam[k], t, s, tau1, tau2);
        }
    }

    let rot = |m: &DMatrix<f64>| q.transpose() * m * q;
    let p0 = rot(&(&spec.sigma0 * spec.sigma0.transpose()));
    let p1 = rot(&(&spec.sigma0 * spec.sigma1.transpose() + &spec.sigma1 * spec.sigma0.transpose()));
    let p2 = rot(&(&spec.sigma1 * spec.sigma1.transpose()));
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let l = lam[i] + lam[j];
            cov[(i, j)] = p0[(i, j)] / l
                + p1[(i, j)] * laplace_sum(&spec.modulation, l, t, s, tau1, tau2)
                + p2[(i, j)] * laplace_square(&spec.modulation, l, t, s, tau1, tau2);
        }
    }
    GaussianLaw::new(spec.from_eigenbasis_vec(mean), spec.from_eigenbasis_mat(cov))
}

/// Average of `f(ρ̃_{s1,s2})` over the period square on an `n×n` node grid
/// (closed-form laws). For trigonometric integrands the periodic rule is
/// exact once `n` exceeds the largest harmonic.
pub fn torus_average(spec: &OuSpec, n: usize, f: impl Fn(&GaussianLaw) -> f64) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let s1 = spec.tau1 * i as f64 / n as f64;
            let s2 = spec.tau2 * j as f64 / n as f64;
            acc += f(&ou_rho_tilde_closed(spec, s1, s2)?);
        }
    }
    Ok(acc / (n * n) as f64)
}

/// Goodness of fit of a sample cloud against a Gaussian law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    pub mean_z: Vec<f64>,
    pub cov_rel_err: f64,
    /// Kolmogorov–Smirnov statistic of the standardised sample (d = 1).
    pub ks_stat: Option<f64>,
    /// 1% critical value `1.63/√n`.
    pub ks_critical: Option<f64>,
    pub flags: Vec<String>,
    pub passed: bool,
}

pub fn gaussian_gof(mu: &EmpiricalMeasure, law: &GaussianLaw) -> Result<GofReport> {
    let d = law.dim();
    if mu.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: mu.dim(),
        });
    }
    let n_eff = 1.0 / mu.weights().iter().map(|w| w * w).sum::<f64>();
    let m = mu.mean();
    let cov = mu.covariance();
    let mut flags = Vec::new();
    let spread = cov.iter().any(|v| v.abs() > 0.0);

    let mean_z: Vec<f64> = (0..d)
        .map(|i| {
            let v = law.variance(i);
            let diff = m[i] - law.mean[i];
            if v > 0.0 {
                diff / (v / n_eff).sqrt()
            } else if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(diff)
            }
        })
        .collect();

    let frob = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let law_norm = frob(&law.cov);
    let diff: Vec<f64> = cov.iter().zip(&law.cov).map(|(a, b)| a - b).collect();
    let cov_rel_err = if law_norm > 0.0 {
        frob(&diff) / law_norm
    } else if spread {
        flags.push("law covariance is degenerate but the sample has spread".into());
        f64::INFINITY
    } else {
        0.0
    };
    if law_norm > 0.0 && !spread {
        flags.push("sample is a point mass but the law is not".into());
    }

    let (ks_stat, ks_critical) = if d == 1 {
        let sd = law.cov[0].sqrt();
        let mut pairs: Vec<(f64, f64)> = mu.samples().iter().copied().zip(mu.weights().iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let ks = if sd > 0.0 {
            let nrm = Normal::new(0.0, 1.0).map_err(|e| Error::Numeric(e.to_string()))?;
            let mut cum = 0.0;
            let mut worst = 0.0f64;
            for (x, w) in pairs {
                let f = nrm.cdf((x - law.mean[0]) / sd);
                worst = worst.max((f - cum).abs());
                cum += w;
                worst = worst.max((f - cum).abs());
            }
            worst
        } else {
            1.0
        };
        (Some(ks), Some(1.63 / n_eff.sqrt()))
    } else {
        (None, None)
    };

    let passed = flags.is_empty()
        && mean_z.iter().all(|z| z.abs() < 4.0)
        && cov_rel_err < 0.05
        && ks_stat.zip(ks_critical).is_none_or(|(k, c)| k < c);
    Ok(GofReport {
        mean_z,
        cov_rel_err,
        ks_stat,
        ks_critical,
        flags,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientSpec;

    fn default_spec() -> OuSpec {
        OuSpec::from_coefficients(&CoefficientSpec::default_ou().build().unwrap()).unwrap()
    }

    fn single_sine(sigma0: f64) -> OuSpec {
        OuSpec::new(1, &[1.0], vec![TrigSum::new(vec![TrigTerm::new(1.0, 1, 0, 0.0)])], &[sigma0], 1.0, 2f64.sqrt())
            .unwrap()
    }

    fn close(a: &GaussianLaw, b: &GaussianLaw, tol: f64) -> bool {
        a.mean.iter().chain(&a.cov).zip(b.mean.iter().chain(&b.cov)).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn single_harmonic_mean_matches_antiderivative() {
        let spec = single_sine(0.5);
        let k = TAU;
        for &t in &[0.0, 0.25, 0.6, -3.3] {
            let law = ou_rho(&spec, t).unwrap();
            let expect = ((k * t).sin() - k * (k * t).cos()) / (1.0 + k * k);
            assert!((law.mean[0] - expect).abs() < 1e-12, "{t}");
            assert!((law.cov[0] - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_forcing_has_zero_mean() {
        let spec = OuSpec::new(1, &[2.0], vec![TrigSum::zero()], &[1.0], 1.0, 2f64.sqrt()).unwrap();
        assert_eq!(ou_rho(&spec, 0.7).unwrap().mean, vec![0.0]);
    }

    #[test]
    fn hull_periodicity_and_diagonal() {
        let spec = default_spec();
        let (tau1, tau2) = spec.periods();
        let base = ou_rho_tilde(&spec, 0.3, 0.8).unwrap();
        assert!(close(&base, &ou_rho_tilde(&spec, 0.3 + tau1, 0.8).unwrap(), 1e-10));
        assert!(close(&base, &ou_rho_tilde(&spec, 0.3, 0.8 + tau2).unwrap(), 1e-10));
        assert!(close(&ou_rho(&spec, 0.45).unwrap(), &ou_rho_tilde(&spec, 0.45, 0.45).unwrap(), 1e-10));
    }

    #[test]
    fn quadrature_and_closed_form_agree() {
        let spec = default_spec();
        for &(t, s) in &[(0.0, 0.0), (0.3, 1.1), (-2.0, 5.5)] {
            let q = ou_rho_tilde(&spec, t, s).unwrap();
            let c = ou_rho_tilde_closed(&spec, t, s).unwrap();
            assert!(close(&q, &c, 1e-10), "{q:?} {c:?}");
        }
    }

    #[test]
    fn modulated_noise_closed_form_matches_quadrature() {
        let a = [2.0, 0.5, 0.5, 1.0];
        let forcing = vec![
            TrigSum::new(vec![TrigTerm::new(1.0, 1, 0, 0.0)]),
            TrigSum::new(vec![TrigTerm::new(0.3, 0, 1, 0.4), TrigTerm::new(0.2, 1, -1, 0.0)]),
        ];
        let g = TrigSum::new(vec![TrigTerm::new(0.6, 1, 0, 0.2), TrigTerm::new(0.3, 0, 2, 1.0)]);
        let spec = OuSpec::new(2, &a, forcing, &[0.5, 0.1, 0.0, 0.4], 1.0, 2f64.sqrt())
            .unwrap()
            .with_modulation(g, &[0.2, 0.0, 0.1, 0.3])
            .unwrap();
        let q = ou_rho_tilde(&spec, 0.2, 0.7).unwrap();
        let c = ou_rho_tilde_closed(&spec, 0.2, 0.7).unwrap();
        assert!(close(&q, &c, 1e-10), "{q:?} {c:?}");
    }

    #[test]
    fn constant_noise_solves_the_lyapunov_equation() {
        let a = [2.0, 0.5, 0.5, 1.0];
        let sig = [0.5, 0.1, 0.0, 0.4];
        let spec = OuSpec::new(2, &a, vec![TrigSum::zero(), TrigSum::zero()], &sig, 1.0, 2f64.sqrt()).unwrap();
        let law = ou_rho_tilde(&spec, 0.1, 0.2).unwrap();
        let am = DMatrix::from_row_slice(2, 2, &a);
        let sm = DMatrix::from_row_slice(2, 2, &sig);
        let c = DMatrix::from_row_slice(2, 2, &law.cov);
        let resid = &am * &c + &c * &am - &sm * sm.transpose();
        assert!(resid.amax() < 1e-8);
    }

    #[test]
    fn quadrature_self_converges() {
        let spec = default_spec();
        let a = ou_rho_tilde_with(&spec, 0.3, 0.9, Quadrature { refinement: 2 }).unwrap();
        let b = ou_rho_tilde_with(&spec, 0.3, 0.9, Quadrature { refinement: 4 }).unwrap();
        assert!(close(&a, &b, 1e-10));
    }

    #[test]
    fn non_positive_drift_is_rejected() {
        assert!(OuSpec::new(1, &[-1.0], vec![TrigSum::zero()], &[1.0], 1.0, 2.0).is_err());
        let tanh = CoefficientSpec {
            nonlinearity: Nonlinearity::Tanh,
            f1: vec![TrigTerm::new(0.3, 1, 0, 0.0)],
            ..CoefficientSpec::default_ou()
        };
        assert!(OuSpec::from_coefficients(&tanh.build().unwrap()).is_err());
    }

    #[test]
    fn exact_samples_pass_the_fit() {
        let law = GaussianLaw::new(vec![0.3], vec![0.125]).unwrap();
        let mu = law.sample(10_000, 77).unwrap();
        let r = gaussian_gof(&mu, &law).unwrap();
        assert!(r.passed, "{r:?}");
        let law2 = GaussianLaw::new(vec![1.0, -1.0], vec![1.0, 0.3, 0.3, 0.5]).unwrap();
        let r2 = gaussian_gof(&law2.sample(10_000, 78).unwrap(), &law2).unwrap();
        assert!(r2.passed, "{r2:?}");
    }

    #[test]
    fn point_mass_is_flagged() {
        let law = GaussianLaw::new(vec![0.0], vec![1.0]).unwrap();
        let mu = EmpiricalMeasure::uniform(1, vec![0.0; 100]).unwrap();
        let r = gaussian_gof(&mu, &law).unwrap();
        assert!(!r.passed && !r.flags.is_empty());
        let degenerate = GaussianLaw::new(vec![0.0], vec![0.0]).unwrap();
        let spread = EmpiricalMeasure::uniform(1, vec![-1.0, 1.0]).unwrap();
        assert!(!gaussian_gof(&spread, &degenerate).unwrap().flags.is_empty());
    }

    #[test]
    fn translated_samples_are_rejected() {
        let law = GaussianLaw::new(vec![0.0], vec![1.0]).unwrap();
        let shifted = GaussianLaw::new(vec![1.0], vec![1.0]).unwrap();
        let r = gaussian_gof(&shifted.sample(10_000, 5).unwrap(), &law).unwrap();
        assert!((r.mean_z[0] - 100.0).abs() < 5.0, "{:?}", r.mean_z);
        assert!(!r.passed);
    }

    #[test]
    fn torus_average_of_mean_vanishes_for_pure_sines() {
        let spec = default_spec();
        let m = torus_average(&spec, 16, |l| l.mean[0]).unwrap();
        assert!(m.abs() < 1e-14);
        let second = torus_average(&spec, 16, |l| l.cov[0] + l.mean[0] * l.mean[0]).unwrap();
        // 0.125 plus half the squared gains of the two harmonics
        let k1 = TAU;
        let k2 = TAU / 2f64.sqrt();
        let expect = 0.125 + 0.5 / (1.0 + k1 * k1) + 0.5 * 0.49 / (1.0 + k2 * k2);
        assert!((second - expect).abs() < 1e-12, "{second} {expect}");
    }
}
