//! Standard-normal kernel and bounded scalar minimization.
//!
//! Everything here is pure and stateless. The normal tail functions are
//! built on `erfc` so that neither tail suffers from cancellation; the
//! quantile uses a rational first guess polished with a Halley step.

#![allow(clippy::excessive_precision, clippy::unreadable_literal)]

use serde::{Deserialize, Serialize};
use thiserror::Error;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// sqrt(2 * pi)
const SQRT_2PI: f64 = 2.506_628_274_631_000_502_415_765_284_811;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("probability {0} is outside the open interval (0, 1)")]
    Domain(f64),
    #[error("minimizer did not converge within {iterations} iterations (best z = {best})")]
    NoConvergence { iterations: usize, best: f64 },
    #[error("invalid bracket [{0}, {1}]")]
    Bracket(f64, f64),
}

/// A value known to lie in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Probability(f64);

impl Probability {
    pub fn new(value: f64) -> Result<Self, NumericsError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(NumericsError::Domain(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Probability {
    type Error = NumericsError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Probability> for f64 {
    fn from(p: Probability) -> f64 {
        p.0
    }
}

/// Clamps probabilities into `[epsilon, 1 - epsilon]` before they reach a
/// quantile function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipPolicy {
    pub epsilon: f64,
}

impl Default for ClipPolicy {
    fn default() -> Self {
        Self { epsilon: 1e-6 }
    }
}

impl ClipPolicy {
    pub fn new(epsilon: f64) -> Result<Self, NumericsError> {
        if epsilon > 0.0 && epsilon < 0.5 {
            Ok(Self { epsilon })
        } else {
            Err(NumericsError::Domain(epsilon))
        }
    }

    pub fn clip(&self, p: f64) -> f64 {
        p.clamp(self.epsilon, 1.0 - self.epsilon)
    }

    /// True when clipping would move `p`.
    pub fn binds(&self, p: f64) -> bool {
        p < self.epsilon || p > 1.0 - self.epsilon
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal survival function `1 - norm_cdf(x)`, accurate in the right tail.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

// Acklam's rational approximation, relative error ~1.15e-9 before refinement.
const A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];
const P_LOW: f64 = 0.02425;

fn acklam_lower(p: f64) -> f64 {
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Quantile for `p <= 0.5`, where `norm_cdf` carries full relative precision.
fn lower_quantile(p: f64) -> f64 {
    let mut x = acklam_lower(p);
    for _ in 0..2 {
        let e = norm_cdf(x) - p;
        let u = e * SQRT_2PI * (0.5 * x * x).exp();
        let step = u / (1.0 + 0.5 * x * u);
        x -= step;
        if step.abs() <= 1e-16 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Inverse of [`norm_cdf`] on the open unit interval.
pub fn norm_inv_cdf(p: f64) -> Result<f64, NumericsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(NumericsError::Domain(p));
    }
    if p <= 0.5 {
        Ok(lower_quantile(p))
    } else {
        Ok(-lower_quantile(1.0 - p))
    }
}

/// Inverse of [`norm_sf`]: the `x` with right-tail mass `p`.
pub fn norm_inv_sf(p: f64) -> Result<f64, NumericsError> {
    norm_inv_cdf(p).map(|x| -x)
}

/// Options for [`minimize_scalar`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizeOptions {
    /// Coarse grid points used to pick the starting sub-bracket.
    pub grid_points: usize,
    pub max_iter: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            grid_points: 33,
            max_iter: 200,
        }
    }
}

/// Result of a scalar minimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub value: f64,
    pub iterations: usize,
}

/// Minimizes `f` over `[lo, hi]` to absolute tolerance `tol` with default options.
pub fn minimize_scalar<F>(f: F, bracket: (f64, f64), tol: f64) -> Result<Minimum, NumericsError>
where
    F: FnMut(f64) -> f64,
{
    minimize_scalar_with(f, bracket, tol, MinimizeOptions::default())
}

/// Grid-seeded Brent minimization (golden section with parabolic steps).
///
/// A coarse grid locates the best sample; Brent's method then refines inside
/// the two neighbouring grid cells. For unimodal `f` this finds the minimizer
/// to `tol`; for multimodal `f` it returns the best local refinement of the
/// best grid point.
pub fn minimize_scalar_with<F>(
    mut f: F,
    bracket: (f64, f64),
    tol: f64,
    opts: MinimizeOptions,
) -> Result<Minimum, NumericsError>
where
    F: FnMut(f64) -> f64,
{
    let (lo, hi) = bracket;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(NumericsError::Bracket(lo, hi));
    }
    let n = opts.grid_points.max(3);
    let h = (hi - lo) / (n - 1) as f64;
    let mut best_k = 0;
    let mut best_f = f64::INFINITY;
    for k in 0..n {
        let x = if k == n - 1 { hi } else { lo + h * k as f64 };
        let fx = f(x);
        if fx < best_f {
            best_f = fx;
            best_k = k;
        }
    }
    let a = if best_k == 0 { lo } else { lo + h * (best_k - 1) as f64 };
    let b = if best_k + 1 >= n { hi } else { lo + h * (best_k + 1) as f64 };
    let start = if best_k == n - 1 { hi } else { lo + h * best_k as f64 };
    brent(&mut f, a, b, start, best_f, tol, opts.max_iter)
}

fn brent<F>(
    f: &mut F,
    mut a: f64,
    mut b: f64,
    start: f64,
    f_start: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Minimum, NumericsError>
where
    F: FnMut(f64) -> f64,
{
    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    let (mut x, mut w, mut v) = (start, start, start);
    let (mut fx, mut fw, mut fv) = (f_start, f_start, f_start);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for iter in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = 2.0 * f64::EPSILON * x.abs() + tol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return Ok(Minimum {
                x,
                value: fx,
                iterations: iter,
            });
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Err(NumericsError::NoConvergence {
        iterations: max_iter,
        best: x,
    })
}

/// Sample variance with the `n - 1` denominator. `None` for fewer than two values.
pub fn sample_variance(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0))
}
