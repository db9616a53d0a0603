//! Snapping of floating coefficients to small exact fractions for display and
//! golden comparison.

use num_rational::Ratio;
use serde::{Serialize, Serializer};
use std::fmt;

/// Default bound on the denominator accepted when snapping.
pub const MAX_DENOMINATOR: i64 = 64;
/// Default closeness required for a snap.
pub const SNAP_TOL: f64 = 1e-9;

/// Returns the fraction with the smallest denominator `≤ max_den` within `tol` of `x`.
pub fn snap(x: f64, max_den: i64, tol: f64) -> Option<Ratio<i64>> {
    if !x.is_finite() {
        return None;
    }
    for d in 1..=max_den {
        let n = (x * d as f64).round();
        if (x - n / d as f64).abs() <= tol * x.abs().max(1.0) {
            return Some(Ratio::new(n as i64, d));
        }
    }
    None
}

/// A real coefficient together with its exact form when one was found.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coef {
    pub value: f64,
    pub exact: Option<Ratio<i64>>,
}

impl Coef {
    pub fn new(value: f64) -> Self {
        Coef {
            value,
            exact: snap(value, MAX_DENOMINATOR, SNAP_TOL),
        }
    }

    /// Coefficient with the given denominator bound.
    pub fn with_bound(value: f64, max_den: i64) -> Self {
        Coef {
            value,
            exact: snap(value, max_den, SNAP_TOL),
        }
    }

    pub fn is_one(&self) -> bool {
        self.exact.map(|r| r == Ratio::from_integer(1)).unwrap_or(false)
    }
}

impl fmt::Display for Coef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.exact {
            Some(r) if *r.denom() == 1 => write!(f, "{}", r.numer()),
            Some(r) => write!(f, "{}/{}", r.numer(), r.denom()),
            None => write!(f, "{:.6}", self.value),
        }
    }
}

impl Serialize for Coef {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}
