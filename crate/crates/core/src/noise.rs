//! Two-sided Brownian motion on a uniform grid.
//!
//! Increments are produced by a counter-based generator: the standard normal
//! behind `ΔW_k` is a pure function of `(seed, absolute index, component)`.
//! There is no stream state, so extending the path to the past, shifting it
//! (the metric dynamical system θ) and evaluating it from many threads are all
//! exact and order independent.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::FixedTime;

/// Uniform time grid: index `k` sits at time `k * dt`, index 0 at time 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    dt: f64,
    step: FixedTime,
}

impl TimeGrid {
    pub fn new(dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::domain(format!("time step must be positive, got {dt}")));
        }
        let step = FixedTime::from_f64(dt);
        if step.raw() <= 0 {
            return Err(Error::domain(format!("time step {dt} below fixed-point resolution")));
        }
        Ok(TimeGrid { dt, step })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Exact grid spacing used for all phase arithmetic.
    pub fn step(&self) -> FixedTime {
        self.step
    }

    pub fn time_of(&self, k: i64) -> FixedTime {
        self.step * k
    }

    pub fn time_f64(&self, k: i64) -> f64 {
        self.time_of(k).to_f64()
    }

    /// Nearest grid index to a physical time.
    pub fn index_of(&self, t: f64) -> i64 {
        (t / self.dt).round() as i64
    }

    fn coarsened(&self, factor: u32) -> TimeGrid {
        TimeGrid {
            dt: self.dt * factor as f64,
            step: self.step * factor as i64,
        }
    }
}

/// A realisation of a two-sided `R^d` Brownian motion sampled on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    seed: u64,
    dim: usize,
    base: TimeGrid,
    stride: u32,
    /// Accumulated θ-shift, in base-grid indices.
    offset: i64,
}

impl NoisePath {
    pub fn new(seed: u64, dim: usize, dt: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("noise dimension must be positive"));
        }
        Ok(NoisePath {
            seed,
            dim,
            base: TimeGrid::new(dt)?,
            stride: 1,
            offset: 0,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }

    pub fn grid(&self) -> TimeGrid {
        self.base.coarsened(self.stride)
    }

    pub fn dt(&self) -> f64 {
        self.grid().dt()
    }

    /// θ_{m·dt}: the increment at index `k` of the result is the increment at
    /// index `k + m` of `self`.
    pub fn shift(&self, m: i64) -> NoisePath {
        NoisePath {
            offset: self.offset + m * self.stride as i64,
            ..self.clone()
        }
    }

    /// The same Brownian path observed on a grid `factor` times coarser:
    /// each coarse increment is the ordered sum of the fine ones it spans.
    pub fn coarsen(&self, factor: u32) -> NoisePath {
        assert!(factor >= 1);
        NoisePath {
            stride: self.stride * factor,
            ..self.clone()
        }
    }

    /// Writes `ΔW_k = W((k+1)dt) - W(k dt)` into `out`.
    pub fn increment_into(&self, k: i64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let sqrt_dt = self.base.dt.sqrt();
        let first = k * self.stride as i64 + self.offset;
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..self.stride as i64 {
                acc += standard_normal(self.seed, first + j, c as u64);
            }
            *o = acc * sqrt_dt;
        }
    }

    pub fn increment(&self, k: i64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.increment_into(k, &mut out);
        out
    }

    /// `W(k dt)` with `W(0) = 0`; for negative `k` this is minus the sum of
    /// the increments on `[k, 0)`.
    pub fn brownian_value(&self, k: i64) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        let mut inc = vec![0.0; self.dim];
        if k >= 0 {
            for i in 0..k {
                self.increment_into(i, &mut inc);
                w.iter_mut().zip(&inc).for_each(|(a, b)| *a += b);
            }
        } else {
            for i in (k..0).rev() {
                self.increment_into(i, &mut inc);
                w.iter_mut().zip(&inc).for_each(|(a, b)| *a -= b);
            }
        }
        w
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keyed hash of a counter triple into 64 uniformly distributed bits.
#[inline]
pub fn counter_bits(seed: u64, index: i64, component: u64) -> u64 {
    let a = mix64(seed.wrapping_add(GOLDEN));
    let b = mix64(a ^ (index as u64).wrapping_mul(GOLDEN));
    mix64(b ^ component.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(GOLDEN))
}

/// Uniform variate in the open interval (0, 1).
#[inline]
pub fn counter_uniform(seed: u64, index: i64, component: u64) -> f64 {
    ((counter_bits(seed, index, component) >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal from a ziggurat draw on a generator keyed by the counter.
#[inline]
pub fn standard_normal(seed: u64, index: i64, component: u64) -> f64 {
    let mut rng = SplitMix64::seed_from_u64(counter_bits(seed, index, component));
    rng.sample(StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn increments_are_deterministic() {
        let w = NoisePath::new(7, 2, 0.01).unwrap();
        let v = NoisePath::new(7, 2, 0.01).unwrap();
        assert_eq!(w.increment(3), v.increment(3));
        assert_eq!(w.increment(3), w.increment(3));
    }

    #[test]
    fn brownian_value_partial_sums() {
        let w = NoisePath::new(11, 1, 0.01).unwrap();
        assert_eq!(w.brownian_value(0), vec![0.0]);
        assert_eq!(w.brownian_value(2)[0], w.increment(0)[0] + w.increment(1)[0]);
        assert_eq!(w.brownian_value(-1)[0], -w.increment(-1)[0]);
    }

    #[test]
    fn shift_identity_and_inverse() {
        let w = NoisePath::new(3, 3, 0.001).unwrap();
        for k in -20..20 {
            assert_eq!(w.shift(0).increment(k), w.increment(k));
            assert_eq!(w.shift(5).shift(-5).increment(k), w.increment(k));
            assert_eq!(w.shift(3).shift(4).increment(k), w.shift(7).increment(k));
            assert_eq!(w.shift(9).increment(k), w.increment(k + 9));
        }
    }

    #[test]
    fn coarse_increments_sum_fine_ones() {
        let fine = NoisePath::new(5, 1, 1e-4).unwrap();
        let coarse = fine.coarsen(4);
        let mut s = 0.0;
        for j in 0..4 {
            s += standard_normal(5, 8 + j, 0);
        }
        assert_eq!(coarse.increment(2)[0], s * 1e-4f64.sqrt());
        assert_eq!(coarse.shift(1).increment(1), coarse.increment(2));
        assert_eq!(coarse.grid().step(), fine.grid().step() * 4);
    }

    #[test]
    fn mean_and_variance_across_seeds() {
        let dt = 0.01;
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|s| NoisePath::new(s, 1, dt).unwrap().increment(0)[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt(), "mean {mean}");
        assert!((var - dt).abs() < 0.05 * dt, "var {var}");
    }

    #[test]
    fn kolmogorov_smirnov_against_standard_normal() {
        let dt = 0.02;
        let w = NoisePath::new(2024, 1, dt).unwrap();
        let mut z: Vec<f64> = (0..10_000).map(|k| w.increment(k)[0] / dt.sqrt()).collect();
        z.sort_by(f64::total_cmp);
        let nrm = Normal::new(0.0, 1.0).unwrap();
        let n = z.len() as f64;
        let d = z
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = nrm.cdf(x);
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.63 / n.sqrt(), "KS {d}");
    }
}
