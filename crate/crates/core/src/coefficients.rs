//! Two-frequency quasi-periodic coefficients.
//!
//! The drift and diffusion are restricted to a declarative family
//!
//! ```text
//! b(t1, t2, x) = -A x + F1(t1, t2) h(x) + F0(t1, t2)
//! s(t1, t2, x) = S0 + G(t1, t2) S1 diag(h(x))
//! ```
//!
//! where `F0` (one sum per component), `F1` and `G` are finite trigonometric
//! sums in `(2 pi t1 / tau1, 2 pi t2 / tau2)` and `h` is a bounded 1-Lipschitz
//! saturation applied componentwise. Time arguments are reduced modulo their
//! periods in fixed point, so periodicity in each argument is exact.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::FixedTime;

/// One harmonic `amplitude * sin(2 pi (n1 t1/tau1 + n2 t2/tau2) + phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub amplitude: f64,
    #[serde(default)]
    pub n1: i32,
    #[serde(default)]
    pub n2: i32,
    #[serde(default)]
    pub phase: f64,
}

impl TrigTerm {
    pub fn new(amplitude: f64, n1: i32, n2: i32, phase: f64) -> Self {
        TrigTerm { amplitude, n1, n2, phase }
    }

    /// Evaluates at turn fractions `u1 = t1/tau1 mod 1`, `u2 = t2/tau2 mod 1`.
    #[inline]
    pub fn eval_turns(&self, u1: f64, u2: f64) -> f64 {
        let turns = (self.n1 as f64 * u1 + self.n2 as f64 * u2).fract();
        self.amplitude * (TAU * turns + self.phase).sin()
    }

    /// Angular frequency in the diagonal time `t = t1 = t2`.
    pub fn omega(&self, tau1: f64, tau2: f64) -> f64 {
        TAU * (self.n1 as f64 / tau1 + self.n2 as f64 / tau2)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrigSum {
    pub terms: Vec<TrigTerm>,
}

impl TrigSum {
    pub fn new(terms: Vec<TrigTerm>) -> Self {
        TrigSum { terms }
    }

    pub fn zero() -> Self {
        TrigSum::default()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.amplitude == 0.0)
    }

    #[inline]
    pub fn eval_turns(&self, u1: f64, u2: f64) -> f64 {
        self.terms.iter().map(|t| t.eval_turns(u1, u2)).sum()
    }

    /// Sum of absolute amplitudes: a sup bound for the sum.
    pub fn amplitude_bound(&self) -> f64 {
        self.terms.iter().map(|t| t.amplitude.abs()).sum()
    }
}

/// Componentwise saturation `h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    /// `h = 0`: the `F1` and `S1` terms vanish.
    #[default]
    None,
    Tanh,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::None => 0.0,
            Nonlinearity::Tanh => x.tanh(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::None => "none",
            Nonlinearity::Tanh => "tanh",
        }
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Nonlinearity::None),
            "tanh" => Ok(Nonlinearity::Tanh),
            other => Err(Error::domain(format!("unknown nonlinearity `{other}` (expected tanh or none)"))),
        }
    }
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Regularity constants the user claims for the coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeclaredConstants {
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(rename = "m")]
    pub m_bound: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub kappa: f64,
    #[serde(default)]
    pub ell: f64,
}

fn one() -> f64 {
    1.0
}

/// A forcing term of one drift component, as written in config files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingTerm {
    #[serde(default)]
    pub component: usize,
    pub amplitude: f64,
    #[serde(default)]
    pub n1: i32,
    #[serde(default)]
    pub n2: i32,
    #[serde(default)]
    pub phase: f64,
}

impl ForcingTerm {
    pub fn new(component: usize, term: TrigTerm) -> Self {
        ForcingTerm {
            component,
            amplitude: term.amplitude,
            n1: term.n1,
            n2: term.n2,
            phase: term.phase,
        }
    }

    pub fn term(&self) -> TrigTerm {
        TrigTerm::new(self.amplitude, self.n1, self.n2, self.phase)
    }
}

/// Serialisable description of a coefficient pair; see the module docs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub dim: usize,
    pub tau1: f64,
    pub tau2: f64,
    /// Symmetric `dim x dim` matrix, row major.
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub f0: Vec<ForcingTerm>,
    #[serde(default)]
    pub f1: Vec<TrigTerm>,
    #[serde(default)]
    pub g: Vec<TrigTerm>,
    pub sigma0: Vec<Vec<f64>>,
    #[serde(default)]
    pub sigma1: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default = "rationally_independent")]
    pub rationally_independent: bool,
    pub declared: DeclaredConstants,
}

fn rationally_independent() -> bool {
    true
}

impl CoefficientSpec {
    /// Scalar quasi-periodic Ornstein-Uhlenbeck equation
    /// `dX = (S(t) - a X) dt + sigma0 dW`.
    pub fn scalar_ou(a: f64, sigma0: f64, forcing: Vec<TrigTerm>, tau1: f64, tau2: f64) -> Self {
        let bound: f64 = forcing.iter().map(|t| t.amplitude.abs()).sum::<f64>() + sigma0.abs();
        CoefficientSpec {
            dim: 1,
            tau1,
            tau2,
            a: vec![vec![a]],
            f0: forcing
                .into_iter()
                .map(|term| ForcingTerm::new(0, term))
                .collect(),
            f1: Vec::new(),
            g: Vec::new(),
            sigma0: vec![vec![sigma0]],
            sigma1: None,
            nonlinearity: Nonlinearity::None,
            rationally_independent: true,
            declared: DeclaredConstants {
                alpha: a,
                beta: 0.0,
                m_bound: bound,
                gamma: 1.0,
                kappa: 1.0,
                ell: bound.max(a),
            },
        }
    }

    /// The reference experiment: `a = 1`, `tau = (1, sqrt 2)`,
    /// `S(t) = sin(2 pi t) + 0.7 sin(2 pi t / sqrt 2)`, `sigma0 = 0.5`.
    pub fn default_ou() -> Self {
        CoefficientSpec::scalar_ou(
            1.0,
            0.5,
            vec![TrigTerm::new(1.0, 1, 0, 0.0), TrigTerm::new(0.7, 0, 1, 0.0)],
            1.0,
            std::f64::consts::SQRT_2,
        )
    }

    pub fn build(&self) -> Result<QpCoefficients> {
        QpCoefficients::from_spec(self)
    }
}

fn config_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        line: None,
        message: message.into(),
    }
}

fn square_matrix(rows: &[Vec<f64>], dim: usize, path: &str) -> Result<Vec<f64>> {
    if rows.len() != dim {
        return Err(config_err(path, format!("expected {dim} rows, found {}", rows.len())));
    }
    let mut out = Vec::with_capacity(dim * dim);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(config_err(
                format!("{path}[{i}]"),
                format!("expected {dim} entries, found {}", row.len()),
            ));
        }
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(config_err(format!("{path}[{i}][{j}]"), "non-finite entry"));
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Validated, immutable coefficient pair.
#[derive(Clone, Debug)]
pub struct QpCoefficients {
    spec: CoefficientSpec,
    dim: usize,
    tau1: FixedTime,
    tau2: FixedTime,
    a: Vec<f64>,
    f0: Vec<TrigSum>,
    f1: TrigSum,
    g: TrigSum,
    sigma0: Vec<f64>,
    sigma1: Vec<f64>,
    h: Nonlinearity,
}

impl QpCoefficients {
    pub fn from_spec(spec: &CoefficientSpec) -> Result<Self> {
        let d = spec.dim;
        if d == 0 {
            return Err(config_err("dim", "must be positive"));
        }
        for (name, tau) in [("tau1", spec.tau1), ("tau2", spec.tau2)] {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(config_err(name, format!("period must be positive, got {tau}")));
            }
        }
        let a = square_matrix(&spec.a, d, "a")?;
        for i in 0..d {
            for j in 0..i {
                if a[i * d + j] != a[j * d + i] {
                    return Err(config_err(format!("a[{i}][{j}]"), "matrix must be symmetric"));
                }
            }
        }
        let sigma0 = square_matrix(&spec.sigma0, d, "sigma0")?;
        let s0 = DMatrix::from_row_slice(d, d, &sigma0);
        if s0.determinant().abs() < 1e-300 && spec.sigma0.iter().flatten().any(|&v| v != 0.0) {
            return Err(config_err("sigma0", "matrix must be invertible or zero"));
        }
        let sigma1 = match &spec.sigma1 {
            Some(rows) => square_matrix(rows, d, "sigma1")?,
            None => vec![0.0; d * d],
        };
        let mut f0 = vec![TrigSum::zero(); d];
        for (i, ft) in spec.f0.iter().enumerate() {
            if ft.component >= d {
                return Err(config_err(
                    format!("f0[{i}].component"),
                    format!("component {} out of range for dim {d}", ft.component),
                ));
            }
            check_term(&ft.term(), &format!("f0[{i}]"))?;
            f0[ft.component].terms.push(ft.term());
        }
        for (i, t) in spec.f1.iter().enumerate() {
            check_term(t, &format!("f1[{i}]"))?;
        }
        for (i, t) in spec.g.iter().enumerate() {
            check_term(t, &format!("g[{i}]"))?;
        }
        let dc = &spec.declared;
        for (name, v) in [
            ("alpha", dc.alpha),
            ("beta", dc.beta),
            ("m", dc.m_bound),
            ("gamma", dc.gamma),
            ("kappa", dc.kappa),
            ("ell", dc.ell),
        ] {
            if !v.is_finite() {
                return Err(config_err(format!("declared.{name}"), "non-finite constant"));
            }
        }
        Ok(QpCoefficients {
            spec: spec.clone(),
            dim: d,
            tau1: FixedTime::from_f64(spec.tau1),
            tau2: FixedTime::from_f64(spec.tau2),
            a,
            f0,
            f1: TrigSum::new(spec.f1.clone()),
            g: TrigSum::new(spec.g.clone()),
            sigma0,
            sigma1,
            h: spec.nonlinearity,
        })
    }

    pub fn spec(&self) -> &CoefficientSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau1(&self) -> f64 {
        self.spec.tau1
    }

    pub fn tau2(&self) -> f64 {
        self.spec.tau2
    }

    /// Periods in the exact time representation.
    pub fn periods(&self) -> (FixedTime, FixedTime) {
        (self.tau1, self.tau2)
    }

    pub fn declared(&self) -> &DeclaredConstants {
        &self.spec.declared
    }

    pub fn matrix_a(&self) -> &[f64] {
        &self.a
    }

    pub fn forcing(&self) -> &[TrigSum] {
        &self.f0
    }

    pub fn sigma0(&self) -> &[f64] {
        &self.sigma0
    }

    pub fn sigma1(&self) -> &[f64] {
        &self.sigma1
    }

    pub fn f1(&self) -> &TrigSum {
        &self.f1
    }

    pub fn g(&self) -> &TrigSum {
        &self.g
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.h
    }

    /// True when the diffusion does not depend on the state.
    pub fn additive_noise(&self) -> bool {
        self.h == Nonlinearity::None || self.g.is_zero() || self.sigma1.iter().all(|&v| v == 0.0)
    }

    /// True when the drift is affine in the state.
    pub fn linear_drift(&self) -> bool {
        self.h == Nonlinearity::None || self.f1.is_zero()
    }

    /// Length of the frozen time-dependent data: `F0` components, `F1`, `G`.
    pub fn frozen_len(&self) -> usize {
        self.dim + 2
    }

    /// Evaluates the time-dependent factors at `(t1, t2)` into `out`.
    #[inline]
    pub fn freeze_into(&self, t1: FixedTime, t2: FixedTime, out: &mut [f64]) {
        let u1 = t1.turns(self.tau1);
        let u2 = t2.turns(self.tau2);
        let d = self.dim;
        for (o, f) in out[..d].iter_mut().zip(&self.f0) {
            *o = f.eval_turns(u1, u2);
        }
        out[d] = self.f1.eval_turns(u1, u2);
        out[d + 1] = self.g.eval_turns(u1, u2);
    }

    pub fn freeze(&self, t1: FixedTime, t2: FixedTime) -> Vec<f64> {
        let mut out = vec![0.0; self.frozen_len()];
        self.freeze_into(t1, t2, &mut out);
        out
    }

    /// Drift from frozen time data.
    #[inline]
    pub fn drift_frozen(&self, frozen: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let f1 = frozen[d];
        for i in 0..d {
            let row = &self.a[i * d..(i + 1) * d];
            let mut ax = 0.0;
            for j in 0..d {
                ax += row[j] * x[j];
            }
            let sat = if f1 != 0.0 { f1 * self.h.apply(x[i]) } else { 0.0 };
            out[i] = -ax + sat + frozen[i];
        }
    }

    /// Diffusion matrix (row major) from frozen time data.
    pub fn diffusion_frozen(&self, frozen: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let g = frozen[d + 1];
        for i in 0..d {
            for j in 0..d {
                let sat = if g != 0.0 { g * self.sigma1[i * d + j] * self.h.apply(x[j]) } else { 0.0 };
                out[i * d + j] = self.sigma0[i * d + j] + sat;
            }
        }
    }

    /// One Euler–Maruyama step in dimension one. Every scalar integration
    /// goes through here, so all one-dimensional flows share its rounding.
    #[inline]
    pub(crate) fn scalar_step(&self, frozen: &[f64], x: f64, dw: f64, dt: f64) -> f64 {
        let (f0, f1, g) = (frozen[0], frozen[1], frozen[2]);
        if self.h == Nonlinearity::None {
            // Only one multiply-add depends on the previous state.
            return x * (1.0 - self.a[0] * dt) + (f0 * dt + self.sigma0[0] * dw);
        }
        let mut ax = 0.0;
        ax += self.a[0] * x;
        let sat = if f1 != 0.0 { f1 * self.h.apply(x) } else { 0.0 };
        let drift = -ax + sat + f0;
        let mut next = x + drift * dt;
        let mut sig = self.sigma0[0];
        if g != 0.0 {
            sig += g * self.sigma1[0] * self.h.apply(x);
        }
        let mut acc = 0.0;
        acc += sig * dw;
        next += acc;
        next
    }

    /// Adds `sigma(x) dw` to `out` without materialising the matrix.
    #[inline]
    pub fn add_noise_frozen(&self, frozen: &[f64], x: &[f64], dw: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let g = frozen[d + 1];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                let mut s = self.sigma0[i * d + j];
                if g != 0.0 {
                    s += g * self.sigma1[i * d + j] * self.h.apply(x[j]);
                }
                acc += s * dw[j];
            }
            out[i] += acc;
        }
    }

    /// `b(t1, t2, x)` at exact times.
    pub fn drift_at(&self, t1: FixedTime, t2: FixedTime, x: &[f64]) -> Vec<f64> {
        let frozen = self.freeze(t1, t2);
        let mut out = vec![0.0; self.dim];
        self.drift_frozen(&frozen, x, &mut out);
        out
    }

    pub fn diffusion_at(&self, t1: FixedTime, t2: FixedTime, x: &[f64]) -> Vec<f64> {
        let frozen = self.freeze(t1, t2);
        let mut out = vec![0.0; self.dim * self.dim];
        self.diffusion_frozen(&frozen, x, &mut out);
        out
    }

    fn check_args(&self, t1: f64, t2: f64, x: &[f64]) -> Result<(FixedTime, FixedTime)> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("non-finite state"));
        }
        let t1 = FixedTime::try_from_f64(t1).ok_or_else(|| Error::domain(format!("bad time {t1}")))?;
        let t2 = FixedTime::try_from_f64(t2).ok_or_else(|| Error::domain(format!("bad time {t2}")))?;
        Ok((t1, t2))
    }

    pub fn eval_drift(&self, t1: f64, t2: f64, x: &[f64]) -> Result<Vec<f64>> {
        let (t1, t2) = self.check_args(t1, t2, x)?;
        Ok(self.drift_at(t1, t2, x))
    }

    pub fn eval_diffusion(&self, t1: f64, t2: f64, x: &[f64]) -> Result<Vec<f64>> {
        let (t1, t2) = self.check_args(t1, t2, x)?;
        Ok(self.diffusion_at(t1, t2, x))
    }

    /// Smallest eigenvalue of `A`.
    pub fn lambda_min(&self) -> f64 {
        let m = DMatrix::from_row_slice(self.dim, self.dim, &self.a);
        SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn random_point(&self, rng: &mut ChaCha8Rng, radius: f64) -> (FixedTime, FixedTime, Vec<f64>) {
        let t1 = FixedTime::from_f64(rng.random::<f64>() * self.spec.tau1);
        let t2 = FixedTime::from_f64(rng.random::<f64>() * self.spec.tau2);
        let x = (0..self.dim).map(|_| rng.random_range(-radius..=radius)).collect();
        (t1, t2, x)
    }

    /// Monte-Carlo infimum of the one-sided Lipschitz rate of the drift.
    pub fn check_dissipativity(
        &self,
        n_samples: usize,
        box_radius: f64,
        rng_seed: u64,
    ) -> Result<DissipativityReport> {
        if n_samples == 0 {
            return Err(Error::domain("n_samples must be at least 1"));
        }
        if !(box_radius > 0.0 && box_radius.is_finite()) {
            return Err(Error::domain(format!("box radius must be positive, got {box_radius}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut frozen = vec![0.0; self.frozen_len()];
        let (mut bx, mut by) = (vec![0.0; self.dim], vec![0.0; self.dim]);
        let mut best: Option<(f64, Witness)> = None;
        let mut drawn = 0;
        while drawn < n_samples {
            let (t1, t2, x) = self.random_point(&mut rng, box_radius);
            let y: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-box_radius..=box_radius)).collect();
            let diff2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
            if diff2 == 0.0 {
                continue;
            }
            drawn += 1;
            self.freeze_into(t1, t2, &mut frozen);
            self.drift_frozen(&frozen, &x, &mut bx);
            self.drift_frozen(&frozen, &y, &mut by);
            let inner: f64 = x
                .iter()
                .zip(&y)
                .zip(bx.iter().zip(&by))
                .map(|((xi, yi), (bxi, byi))| (xi - yi) * (bxi - byi))
                .sum();
            let ratio = -inner / diff2;
            if best.as_ref().is_none_or(|(r, _)| ratio < *r) {
                best = Some((
                    ratio,
                    Witness {
                        t1: t1.to_f64(),
                        t2: t2.to_f64(),
                        x,
                        y,
                    },
                ));
            }
        }
        let (alpha_hat, worst) = best.expect("at least one sample");
        let declared_alpha = self.spec.declared.alpha;
        Ok(DissipativityReport {
            alpha_hat,
            declared_alpha,
            passed: alpha_hat >= declared_alpha - 1e-6 && alpha_hat > 0.0,
            worst,
            n_samples,
            rng_seed,
        })
    }

    /// Monte-Carlo estimates of the diffusion Lipschitz constant, the bound at
    /// the origin and the time-Hölder exponent.
    pub fn check_lipschitz_and_bounds(
        &self,
        n_samples: usize,
        box_radius: f64,
        rng_seed: u64,
    ) -> Result<LipschitzReport> {
        if n_samples == 0 {
            return Err(Error::domain("n_samples must be at least 1"));
        }
        if !(box_radius > 0.0 && box_radius.is_finite()) {
            return Err(Error::domain(format!("box radius must be positive, got {box_radius}")));
        }
        let d = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let zero = vec![0.0; d];
        let mut beta_hat: f64 = 0.0;
        let mut m_hat: f64 = 0.0;
        let mut frozen = vec![0.0; self.frozen_len()];
        let (mut sx, mut sy) = (vec![0.0; d * d], vec![0.0; d * d]);
        let mut b0 = vec![0.0; d];
        for _ in 0..n_samples {
            let (t1, t2, x) = self.random_point(&mut rng, box_radius);
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-box_radius..=box_radius)).collect();
            self.freeze_into(t1, t2, &mut frozen);
            let dist = norm(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
            if dist > 0.0 {
                self.diffusion_frozen(&frozen, &x, &mut sx);
                self.diffusion_frozen(&frozen, &y, &mut sy);
                let num = norm(&sx.iter().zip(&sy).map(|(a, b)| a - b).collect::<Vec<_>>());
                beta_hat = beta_hat.max(num / dist);
            }
            self.drift_frozen(&frozen, &zero, &mut b0);
            self.diffusion_frozen(&frozen, &zero, &mut sx);
            m_hat = m_hat.max(norm(&b0) + norm(&sx));
        }

        // time increments at geometric scales, both arguments moved together
        let scales = [1e-1, 1e-2, 1e-3, 1e-4];
        let per_scale = (n_samples / scales.len()).max(16);
        let mut pts = Vec::new();
        for &h in &scales {
            let dh = FixedTime::from_f64(h);
            let mut worst: f64 = 0.0;
            for _ in 0..per_scale {
                let (t1, t2, x) = self.random_point(&mut rng, box_radius);
                let db: Vec<f64> = self
                    .drift_at(t1 + dh, t2 + dh, &x)
                    .iter()
                    .zip(self.drift_at(t1, t2, &x))
                    .map(|(a, b)| a - b)
                    .collect();
                let ds: Vec<f64> = self
                    .diffusion_at(t1 + dh, t2 + dh, &x)
                    .iter()
                    .zip(self.diffusion_at(t1, t2, &x))
                    .map(|(a, b)| a - b)
                    .collect();
                worst = worst.max(norm(&db) + norm(&ds));
            }
            pts.push((h.ln(), worst));
        }
        let gamma_hat = if pts.iter().any(|&(_, w)| w == 0.0) {
            1.0
        } else {
            let xy: Vec<(f64, f64)> = pts.iter().map(|&(lh, w)| (lh, w.ln())).collect();
            least_squares_slope(&xy).min(1.0)
        };
        let dc = &self.spec.declared;
        Ok(LipschitzReport {
            beta_hat,
            m_hat,
            gamma_hat,
            passed: beta_hat <= dc.beta + 1e-6 && m_hat <= dc.m_bound + 1e-6 && gamma_hat >= dc.gamma - 0.1,
            n_samples,
            rng_seed,
        })
    }

    /// Audited constants `(alpha_hat, beta_hat, m_hat)` with fixed sampling
    /// settings, used to schedule pull-backs.
    pub fn audited_constants(&self) -> Result<AuditedConstants> {
        let dis = self.check_dissipativity(20_000, 10.0, 0x5eed)?;
        let lip = self.check_lipschitz_and_bounds(20_000, 10.0, 0x5eed)?;
        Ok(AuditedConstants {
            alpha: dis.alpha_hat,
            beta: lip.beta_hat,
            m: lip.m_hat,
        })
    }
}

fn check_term(t: &TrigTerm, path: &str) -> Result<()> {
    if !(t.amplitude.is_finite() && t.phase.is_finite()) {
        return Err(config_err(path, "non-finite amplitude or phase"));
    }
    Ok(())
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Ordinary least-squares slope of `y` on `x`.
pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub t1: f64,
    pub t2: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipativityReport {
    pub alpha_hat: f64,
    pub declared_alpha: f64,
    pub passed: bool,
    pub worst: Witness,
    pub n_samples: usize,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub beta_hat: f64,
    pub m_hat: f64,
    pub gamma_hat: f64,
    pub passed: bool,
    pub n_samples: usize,
    pub rng_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditedConstants {
    pub alpha: f64,
    pub beta: f64,
    pub m: f64,
}

impl AuditedConstants {
    /// `alpha - (p-1) beta^2 / 2`, the pathwise contraction rate in `L^p`.
    pub fn contraction_rate(&self, p: f64) -> f64 {
        self.alpha - (p - 1.0) * self.beta * self.beta / 2.0
    }

    /// Uniform bound `C` with `E|X_t|^2 <= C (1 + E|xi|^2)` for `p = 2`,
    /// obtained from the Itô estimate with `eps = (2 alpha - beta^2) / 6`.
    pub fn second_moment_bound(&self) -> Option<f64> {
        let gap = 2.0 * self.alpha - self.beta * self.beta;
        if gap <= 0.0 {
            return None;
        }
        let eps = gap / 6.0;
        let lambda = gap - 3.0 * eps;
        let m2 = self.m * self.m;
        let k = m2 / (2.0 * eps) + (self.beta * self.beta / eps + 1.0) * m2;
        Some((k / lambda).max(1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(a: f64) -> QpCoefficients {
        CoefficientSpec::scalar_ou(a, 0.5, vec![], 1.0, std::f64::consts::SQRT_2)
            .build()
            .unwrap()
    }

    #[test]
    fn ou_drift_at_origin_time() {
        let c = CoefficientSpec::default_ou().build().unwrap();
        assert_eq!(c.eval_drift(0.0, 0.0, &[2.0]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn periodic_in_each_argument() {
        let c = CoefficientSpec::default_ou().build().unwrap();
        let (tau1, tau2) = c.periods();
        let t1 = FixedTime::from_f64(0.123);
        let t2 = FixedTime::from_f64(-4.56);
        let x = [0.7];
        assert_eq!(c.drift_at(t1 + tau1, t2, &x), c.drift_at(t1, t2, &x));
        assert_eq!(c.drift_at(t1, t2 + tau2, &x), c.drift_at(t1, t2, &x));
        assert_eq!(c.diffusion_at(t1, t2 - tau2 * 3, &x), c.diffusion_at(t1, t2, &x));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let c = linear(1.0);
        assert!(matches!(c.eval_drift(f64::NAN, 0.0, &[0.0]), Err(Error::Domain(_))));
        assert!(matches!(c.eval_drift(0.0, 0.0, &[f64::INFINITY]), Err(Error::Domain(_))));
        assert!(matches!(c.eval_diffusion(0.0, 0.0, &[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn constant_diffusion() {
        let c = linear(1.0);
        for t in [0.0, 0.3, 17.1] {
            assert_eq!(c.eval_diffusion(t, 2.0 * t, &[t - 3.0]).unwrap(), vec![0.5]);
        }
    }

    #[test]
    fn linear_drift_has_exact_rate() {
        let rep = linear(1.0).check_dissipativity(10_000, 10.0, 1).unwrap();
        assert!((rep.alpha_hat - 1.0).abs() < 1e-12);
        assert!(rep.passed);
    }

    #[test]
    fn saturated_drift_rate_bound() {
        let mut spec = CoefficientSpec::scalar_ou(1.0, 0.5, vec![], 1.0, 2f64.sqrt());
        spec.nonlinearity = Nonlinearity::Tanh;
        spec.f1 = vec![TrigTerm::new(0.3, 0, 0, std::f64::consts::FRAC_PI_2)];
        spec.declared.alpha = 0.7;
        let c = spec.build().unwrap();
        // F1 = 0.3 sin(pi/2) = 0.3, so b = -x + 0.3 tanh x
        assert_eq!(c.eval_drift(0.2, 0.9, &[1.0]).unwrap()[0], -1.0 + 0.3 * 1f64.tanh());
        let rep = c.check_dissipativity(100_000, 5.0, 9).unwrap();
        // inf of 1 - 0.3 sech^2 is 0.7, attained only at the origin
        assert!(rep.alpha_hat >= 0.7 - 1e-6, "{}", rep.alpha_hat);
        assert!(rep.alpha_hat < 0.72);
        assert!(rep.passed);
    }

    #[test]
    fn anti_dissipative_drift_fails_with_witness() {
        let mut spec = CoefficientSpec::scalar_ou(-1.0, 0.5, vec![], 1.0, 2f64.sqrt());
        spec.declared.alpha = 1.0;
        let c = spec.build().unwrap();
        let rep = c.check_dissipativity(1000, 3.0, 4).unwrap();
        assert!(rep.alpha_hat <= -1.0 + 1e-12);
        assert!(!rep.passed);
        let again = c.check_dissipativity(1000, 3.0, 4).unwrap();
        assert_eq!(rep.worst, again.worst);
    }

    #[test]
    fn lipschitz_report_for_ou() {
        let mut spec = CoefficientSpec::scalar_ou(
            1.0,
            0.5,
            vec![TrigTerm::new(2.0, 1, 0, 0.0)],
            1.0,
            2f64.sqrt(),
        );
        spec.declared.m_bound = 2.5;
        let c = spec.build().unwrap();
        let rep = c.check_lipschitz_and_bounds(20_000, 5.0, 2).unwrap();
        assert_eq!(rep.beta_hat, 0.0);
        assert!(rep.m_hat <= 2.0 + 2.0 + 0.5);
        assert!(rep.gamma_hat >= 0.9, "{}", rep.gamma_hat);
    }

    #[test]
    fn two_frequency_forcing_is_lipschitz_in_time() {
        let c = CoefficientSpec::default_ou().build().unwrap();
        let rep = c.check_lipschitz_and_bounds(20_000, 5.0, 3).unwrap();
        assert!(rep.gamma_hat >= 0.9, "{}", rep.gamma_hat);
        assert!(rep.m_hat <= 1.7 + 0.5 + 1e-12);
    }

    #[test]
    fn bad_specs_name_the_offending_path() {
        let mut spec = CoefficientSpec::default_ou();
        spec.tau2 = -1.0;
        match spec.build() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "tau2"),
            other => panic!("{other:?}"),
        }
        let mut spec = CoefficientSpec::default_ou();
        spec.f0[1].component = 3;
        match spec.build() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "f0[1].component"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn moment_bound_is_finite_for_contractive_constants() {
        let k = AuditedConstants { alpha: 1.0, beta: 0.0, m: 2.2 };
        let c = k.second_moment_bound().unwrap();
        assert!(c > 1.0 && c.is_finite());
        assert!(AuditedConstants { alpha: 0.1, beta: 1.0, m: 1.0 }.second_moment_bound().is_none());
    }
}
