//! Exponential and logarithmic maps on the flat unit torus.
//!
//! Fractional coordinates live component-wise on [0,1) with period 1; all flow
//! interpolants and velocity targets for coordinates go through these maps.

use std::f64::consts::TAU;

/// Wraps a value into [0,1), guarding against `rem_euclid` rounding up to 1.0.
#[inline]
pub fn wrap_unit(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Tangent of the shortest arc from `f` to `f_prime`, in [-0.5, 0.5].
///
/// The antipodal tie (distance exactly 0.5) resolves to +0.5 via the atan2
/// convention atan2(0, -1) = +pi.
#[inline]
pub fn torus_log(f: f64, f_prime: f64) -> f64 {
    let theta = TAU * (f_prime - f);
    theta.sin().atan2(theta.cos()) / TAU
}

/// Walks distance `v` from `f` along the torus, landing back in [0,1).
#[inline]
pub fn torus_exp(f: f64, v: f64) -> f64 {
    wrap_unit(f + v)
}
