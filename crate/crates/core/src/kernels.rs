//! Scalar math kernels modeled on the accelerator's arithmetic units.
//!
//! `kexp` and `klog2` use hyperbolic CORDIC (rotation and vectoring mode
//! respectively) after a power-of-two range reduction; `krecip` runs the
//! Newton reciprocal iteration `z <- z * (2 - x * z)` from an exponent-only
//! seed. Everything is evaluated in `f64`: these are functional models, not
//! bit-true fixed-point descriptions of the hardware.
//!
//! The pipeline goes through [`KernelConfig`], which dispatches either to the
//! standard library (`Backend::Reference`) or to these kernels.

use std::f64::consts::{LN_2, LOG2_E};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CORDIC_ITERATIONS: u32 = 24;
pub const DEFAULT_NEWTON_ITERATIONS: u32 = 5;

/// Largest shift index for which a precomputed `atanh(2^-i)` is kept.
const MAX_CORDIC_ITERATIONS: u32 = 62;

/// Seed mantissa for the reciprocal: `0.75 * 2^-e` keeps the initial
/// relative error in `[0.25, 0.5)` for any mantissa in `[1, 2)`.
const RECIP_SEED: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Reference,
    CordicNewton,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Reference => "reference",
            Backend::CordicNewton => "cordic-newton",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Backend::Reference),
            "cordic-newton" => Ok(Backend::CordicNewton),
            other => Err(Error::Config(format!(
                "unknown math backend {other:?} (expected reference or cordic-newton)"
            ))),
        }
    }
}

/// Selects the scalar math used by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub cordic_iterations: u32,
    pub newton_iterations: u32,
    pub backend: Backend,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            cordic_iterations: DEFAULT_CORDIC_ITERATIONS,
            newton_iterations: DEFAULT_NEWTON_ITERATIONS,
            backend: Backend::Reference,
        }
    }
}

impl KernelConfig {
    pub fn reference() -> Self {
        Self::default()
    }

    pub fn cordic_newton() -> Self {
        Self {
            backend: Backend::CordicNewton,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(8..=MAX_CORDIC_ITERATIONS).contains(&self.cordic_iterations) {
            return Err(Error::Config(format!(
                "cordic_iterations must be in [8, {MAX_CORDIC_ITERATIONS}], got {}",
                self.cordic_iterations
            )));
        }
        if self.newton_iterations < 1 {
            return Err(Error::Config("newton_iterations must be >= 1".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn exp(&self, x: f64) -> f64 {
        match self.backend {
            Backend::Reference => x.exp(),
            Backend::CordicNewton => kexp_with(x, self.cordic_iterations),
        }
    }

    /// Base-2 logarithm. Non-positive input yields NaN (or -inf at zero) on
    /// both backends; callers only pass positive values.
    #[inline]
    pub fn log2(&self, x: f64) -> f64 {
        match self.backend {
            Backend::Reference => x.log2(),
            Backend::CordicNewton => match klog2_with(x, self.cordic_iterations) {
                Ok(v) => v,
                Err(_) if x == 0.0 => f64::NEG_INFINITY,
                Err(_) => f64::NAN,
            },
        }
    }

    #[inline]
    pub fn ln(&self, x: f64) -> f64 {
        match self.backend {
            Backend::Reference => x.ln(),
            Backend::CordicNewton => self.log2(x) * LN_2,
        }
    }

    #[inline]
    pub fn exp2(&self, x: f64) -> f64 {
        match self.backend {
            Backend::Reference => x.exp2(),
            Backend::CordicNewton => kexp_with(x * LN_2, self.cordic_iterations),
        }
    }

    #[inline]
    pub fn recip(&self, x: f64) -> f64 {
        match self.backend {
            Backend::Reference => 1.0 / x,
            Backend::CordicNewton => {
                krecip_with(x, self.newton_iterations).unwrap_or(f64::INFINITY)
            }
        }
    }

    /// `a / b`, through the reciprocal unit on the CORDIC backend.
    #[inline]
    pub fn div(&self, a: f64, b: f64) -> f64 {
        match self.backend {
            Backend::Reference => a / b,
            Backend::CordicNewton => a * self.recip(b),
        }
    }
}

/// `atanh(2^-i)` for i = 0..=MAX (index 0 unused).
fn atanh_table() -> &'static [f64; MAX_CORDIC_ITERATIONS as usize + 1] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[f64; MAX_CORDIC_ITERATIONS as usize + 1]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; MAX_CORDIC_ITERATIONS as usize + 1];
        for (i, v) in t.iter_mut().enumerate().skip(1) {
            *v = (0.5f64.powi(i as i32)).atanh();
        }
        t
    })
}

/// Shift sequence for hyperbolic CORDIC: 1, 2, 3, 4, 4, 5, ..., 13, 13, ...
/// Indices 4, 13, 40 (k -> 3k + 1) are repeated for convergence.
fn hyperbolic_schedule(iterations: u32) -> impl Iterator<Item = u32> {
    let mut next_repeat = 4;
    (1..=iterations).flat_map(move |i| {
        let reps = if i == next_repeat {
            next_repeat = 3 * i + 1;
            2
        } else {
            1
        };
        std::iter::repeat_n(i, reps)
    })
}

/// Product of `sqrt(1 - 2^-2i)` over the schedule.
fn hyperbolic_gain(iterations: u32) -> f64 {
    hyperbolic_schedule(iterations)
        .map(|i| (1.0 - 0.25f64.powi(i as i32)).sqrt())
        .product()
}

/// Multiply by `2^k` without intermediate overflow or premature underflow.
fn scale_pow2(mut v: f64, mut k: i32) -> f64 {
    let pow2 = |e: i32| f64::from_bits(((e + 1023) as u64) << 52);
    while k > 1000 {
        v *= pow2(1000);
        k -= 1000;
    }
    while k < -1000 {
        v *= pow2(-1000);
        k += 1000;
    }
    v * pow2(k)
}

/// Split a positive finite `x` into `(m, e)` with `x = m * 2^e`, `m` in `[1, 2)`.
fn split_exponent(x: f64) -> (f64, i32) {
    debug_assert!(x > 0.0 && x.is_finite());
    let (x, bias) = if x < f64::MIN_POSITIVE {
        (x * 2f64.powi(64), -64)
    } else {
        (x, 0)
    };
    let bits = x.to_bits();
    let e = ((bits >> 52) & 0x7ff) as i32 - 1023;
    let m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1023u64 << 52));
    (m, e + bias)
}

/// Exponential with default iteration count.
pub fn kexp(x: f64) -> f64 {
    kexp_with(x, DEFAULT_CORDIC_ITERATIONS)
}

/// Exponential via `x = k ln2 + r` and hyperbolic CORDIC rotation on `r`.
///
/// Saturates to `+inf` above the `f64` range and to `0` below it.
pub fn kexp_with(x: f64, iterations: u32) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x > 709.8 {
        return f64::INFINITY;
    }
    if x < -745.2 {
        return 0.0;
    }
    let iterations = iterations.min(MAX_CORDIC_ITERATIONS);
    let k = (x * LOG2_E).round();
    let r = (-k).mul_add(LN_2, x);
    if r == 0.0 {
        return scale_pow2(1.0, k as i32);
    }

    let table = atanh_table();
    let mut cx = 1.0 / hyperbolic_gain(iterations);
    let mut cy = 0.0;
    let mut z = r;
    for i in hyperbolic_schedule(iterations) {
        let t = 0.5f64.powi(i as i32);
        let (dx, dy) = (cy * t, cx * t);
        if z >= 0.0 {
            cx += dx;
            cy += dy;
            z -= table[i as usize];
        } else {
            cx -= dx;
            cy -= dy;
            z += table[i as usize];
        }
    }
    // Residual angle correction: e^r = (cosh + sinh)(r - z) * e^z.
    let er = (cx + cy) * (1.0 + z + 0.5 * z * z);
    scale_pow2(er, k as i32)
}

/// Base-2 logarithm with default iteration count.
pub fn klog2(x: f64) -> Result<f64> {
    klog2_with(x, DEFAULT_CORDIC_ITERATIONS)
}

/// Base-2 logarithm: exponent split, then `ln m = 2 atanh((m-1)/(m+1))` by
/// hyperbolic CORDIC vectoring on the mantissa.
pub fn klog2_with(x: f64, iterations: u32) -> Result<f64> {
    if x.is_nan() || x <= 0.0 {
        return Err(Error::Domain(format!("klog2 requires x > 0, got {x}")));
    }
    if x.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let iterations = iterations.min(MAX_CORDIC_ITERATIONS);
    let (mut m, mut e) = split_exponent(x);
    // Center the mantissa on 1 so |atanh| stays small.
    if m > std::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }

    let table = atanh_table();
    let mut cx = m + 1.0;
    let mut cy = m - 1.0;
    let mut z = 0.0;
    for i in hyperbolic_schedule(iterations) {
        if cy == 0.0 {
            break;
        }
        let t = 0.5f64.powi(i as i32);
        let (dx, dy) = (cy * t, cx * t);
        if cy > 0.0 {
            cx -= dx;
            cy -= dy;
            z += table[i as usize];
        } else {
            cx += dx;
            cy += dy;
            z -= table[i as usize];
        }
    }
    // Residual: atanh(y/x) for the remaining small ratio.
    let ratio = cy / cx;
    let z = z + ratio + ratio * ratio * ratio / 3.0;
    Ok(e as f64 + 2.0 * z * LOG2_E)
}

/// Reciprocal with default iteration count.
pub fn krecip(x: f64) -> Result<f64> {
    krecip_with(x, DEFAULT_NEWTON_ITERATIONS)
}

/// Reciprocal by Newton iteration.
pub fn krecip_with(x: f64, iterations: u32) -> Result<f64> {
    Ok(*krecip_iterates(x, iterations)?
        .last()
        .expect("seed is always present"))
}

/// The Newton iterates `z_0 (seed), z_1, ..., z_n` for `1/x`.
pub fn krecip_iterates(x: f64, iterations: u32) -> Result<Vec<f64>> {
    if x == 0.0 || !x.is_finite() {
        return Err(Error::Domain(format!(
            "krecip requires finite non-zero x, got {x}"
        )));
    }
    let (_, e) = split_exponent(x.abs());
    let mut z = scale_pow2(RECIP_SEED, -e).copysign(x);
    let mut out = Vec::with_capacity(iterations as usize + 1);
    out.push(z);
    for _ in 0..iterations {
        z *= 2.0 - x * z;
        out.push(z);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn schedule_repeats_four_and_thirteen() {
        let s: Vec<u32> = hyperbolic_schedule(14).collect();
        assert_eq!(s.iter().filter(|&&i| i == 4).count(), 2);
        assert_eq!(s.iter().filter(|&&i| i == 13).count(), 2);
        assert_eq!(s.len(), 16);
        let long: Vec<u32> = hyperbolic_schedule(41).collect();
        assert_eq!(long.iter().filter(|&&i| i == 40).count(), 2);
    }

    #[test]
    fn exp_identity_and_e() {
        assert_eq!(kexp(0.0), 1.0);
        assert!(rel(kexp(1.0), std::f64::consts::E) < 1e-4);
    }

    #[test]
    fn exp_saturates_without_nan() {
        let v = kexp(-60.0);
        assert!(v >= 0.0 && v.is_finite());
        assert!(rel(v, (-60.0f64).exp()) < 1e-4);
        assert_eq!(kexp(-800.0), 0.0);
        assert_eq!(kexp(800.0), f64::INFINITY);
        let sub = kexp(-740.0);
        assert!(sub >= 0.0 && !sub.is_nan());
    }

    #[test]
    fn log2_exact_cases() {
        assert_eq!(klog2(1.0).unwrap(), 0.0);
        assert!((klog2(8.0).unwrap() - 3.0).abs() < 1e-4);
        assert!(rel(klog2(10.0).unwrap(), 10f64.log2()) < 1e-4);
    }

    #[test]
    fn log2_rejects_non_positive() {
        assert!(matches!(klog2(0.0), Err(Error::Domain(_))));
        assert!(matches!(klog2(-1.0), Err(Error::Domain(_))));
        assert!(matches!(klog2(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn log2_subnormal() {
        let x = 1e-310;
        assert!(rel(klog2(x).unwrap(), x.log2()) < 1e-4);
    }

    #[test]
    fn recip_cases() {
        assert_eq!(krecip(1.0).unwrap(), 1.0);
        assert_eq!(krecip(2.0).unwrap(), 0.5);
        assert!(rel(krecip(3.0).unwrap(), 1.0 / 3.0) < 1e-6);
        assert!(rel(krecip(-7.5).unwrap(), -1.0 / 7.5) < 1e-6);
        assert!(matches!(krecip(0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn recip_seed_error_below_half() {
        for &x in &[1.0, 1.25, 1.5, 1.999_999, 3.0, 1e-9, 7e12] {
            let z0 = krecip_iterates(x, 0).unwrap()[0];
            assert!((1.0 - x * z0).abs() < 0.5, "x={x}");
        }
    }

    #[test]
    fn low_iteration_counts_still_meet_tolerance() {
        for &x in &[-3.3, 0.2, 2.9, 40.0] {
            assert!(rel(kexp_with(x, 8), x.exp()) < 1e-4, "x={x}");
        }
        for &x in &[0.01, 0.9, 1.3, 1e6] {
            assert!((klog2_with(x, 8).unwrap() - x.log2()).abs() < 1e-4);
        }
    }

    #[test]
    fn config_dispatch_and_validation() {
        let r = KernelConfig::reference();
        let c = KernelConfig::cordic_newton();
        for &x in &[-3.0, 0.5, 12.0] {
            assert!(rel(c.exp(x), r.exp(x)) < 1e-10);
        }
        assert!(rel(c.div(1.0, 7.0), r.div(1.0, 7.0)) < 1e-10);
        assert!(rel(c.ln(5.0), r.ln(5.0)) < 1e-10);
        assert!(KernelConfig {
            cordic_iterations: 7,
            ..c
        }
        .validate()
        .is_err());
        assert!(KernelConfig {
            newton_iterations: 0,
            ..c
        }
        .validate()
        .is_err());
        assert_eq!(
            "cordic-newton".parse::<Backend>().unwrap(),
            Backend::CordicNewton
        );
        assert!("fast".parse::<Backend>().is_err());
    }
}
