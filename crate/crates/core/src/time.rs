//! Fixed-point time arithmetic.
//!
//! Coefficient phases, grid times and cylinder angles are all carried as
//! signed 64.64 fixed-point numbers. Addition and reduction modulo a period
//! are then exact integer operations, so identities such as
//! `b(t + tau1, s, x) == b(t, s, x)` or the grid shift relation of the
//! reparameterised flow hold bit for bit, which floating-point sums cannot
//! guarantee for an irrational period like `sqrt(2)`.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

const FRAC_BITS: u32 = 64;
const SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct FixedTime(i128);

impl FixedTime {
    pub const ZERO: FixedTime = FixedTime(0);

    /// Nearest representable time. Panics on non-finite or out-of-range input
    /// (|t| must stay below 2^62).
    pub fn from_f64(t: f64) -> Self {
        assert!(t.is_finite(), "non-finite time {t}");
        assert!(t.abs() < 4.0e18, "time {t} out of fixed-point range");
        FixedTime((t * SCALE).round() as i128)
    }

    pub fn try_from_f64(t: f64) -> Option<Self> {
        (t.is_finite() && t.abs() < 4.0e18).then(|| Self::from_f64(t))
    }

    pub const fn from_raw(raw: i128) -> Self {
        FixedTime(raw)
    }

    pub const fn raw(self) -> i128 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        let int = (self.0 >> FRAC_BITS) as f64;
        let frac = (self.0 & ((1i128 << FRAC_BITS) - 1)) as f64 / SCALE;
        int + frac
    }

    /// Representative in `[0, period)`.
    pub fn rem_period(self, period: FixedTime) -> FixedTime {
        debug_assert!(period.0 > 0);
        FixedTime(self.0.rem_euclid(period.0))
    }

    /// `self / period` reduced into `[0, 1)`, as a float.
    pub fn turns(self, period: FixedTime) -> f64 {
        let r = self.rem_period(period);
        let u = r.0 as f64 / period.0 as f64;
        // the i128 -> f64 rounding can land exactly on 1.0
        if u >= 1.0 {
            0.0
        } else {
            u
        }
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }
}

impl From<f64> for FixedTime {
    fn from(t: f64) -> Self {
        FixedTime::from_f64(t)
    }
}

impl fmt::Debug for FixedTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FixedTime({})", self.to_f64())
    }
}

impl fmt::Display for FixedTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

impl Add for FixedTime {
    type Output = FixedTime;
    fn add(self, rhs: FixedTime) -> FixedTime {
        FixedTime(self.0 + rhs.0)
    }
}

impl AddAssign for FixedTime {
    fn add_assign(&mut self, rhs: FixedTime) {
        self.0 += rhs.0;
    }
}

impl Sub for FixedTime {
    type Output = FixedTime;
    fn sub(self, rhs: FixedTime) -> FixedTime {
        FixedTime(self.0 - rhs.0)
    }
}

impl Neg for FixedTime {
    type Output = FixedTime;
    fn neg(self) -> FixedTime {
        FixedTime(-self.0)
    }
}

impl Mul<i64> for FixedTime {
    type Output = FixedTime;
    fn mul(self, rhs: i64) -> FixedTime {
        FixedTime(self.0 * rhs as i128)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_close() {
        for &t in &[0.0, 1.0, -2.5, 1e-3, std::f64::consts::SQRT_2, 123456.789] {
            let back = FixedTime::from_f64(t).to_f64();
            assert!((back - t).abs() <= 1e-15 * t.abs().max(1.0), "{t} -> {back}");
        }
    }

    #[test]
    fn period_shift_is_exact() {
        let tau = FixedTime::from_f64(std::f64::consts::SQRT_2);
        let t = FixedTime::from_f64(0.3713);
        assert_eq!((t + tau * 7).rem_period(tau), t.rem_period(tau));
        assert_eq!((t - tau * 3).turns(tau), t.turns(tau));
    }

    #[test]
    fn negative_times_reduce_into_range() {
        let tau = FixedTime::from_f64(1.0);
        let r = FixedTime::from_f64(-0.25).rem_period(tau);
        assert_eq!(r.to_f64(), 0.75);
    }
}
