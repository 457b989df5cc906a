//! Small numerical kernels shared by the analytic and estimator layers.

use std::f64::consts::{PI, SQRT_2};

/// `1/sqrt(2*pi)`
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Neumaier-compensated running sum.
///
/// Partition functions and cumulative environment sums are accumulated through
/// this type so the result only depends on the order in which terms are added.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl Extend<f64> for CompensatedSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::new();
        s.extend(iter);
        s
    }
}

/// `log(exp(a) + exp(b))` without overflow.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Max-subtracted log-sum-exp. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: CompensatedSum = xs.iter().map(|&x| (x - max).exp()).collect();
    max + s.value().ln()
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * libm::erfc(-x / SQRT_2)
}

/// `log P(Z >= z)` for a standard normal `Z`, accurate far into the upper tail.
pub fn log_normal_upper_tail(z: f64) -> f64 {
    if z == f64::NEG_INFINITY {
        return 0.0;
    }
    if z == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    if z < 5.0 {
        return (0.5 * libm::erfc(z / SQRT_2)).ln();
    }
    // Mills ratio R(z) = Q(z)/phi(z) by continued fraction (modified Lentz).
    // R(z) = 1/(z + 1/(z + 2/(z + 3/(z + ...))))
    let tiny = 1e-300;
    let mut f = z;
    let mut c = z;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64;
        d = z + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = z + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    -0.5 * z * z - 0.5 * (2.0 * PI).ln() - f.ln()
}

/// Bisection for a sign change of a nondecreasing function on `[lo, hi]`.
///
/// Stops when `|g(t)| <= tol` or the bracket collapses to adjacent floats.
pub fn bisect_increasing<F: Fn(f64) -> f64>(g: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..2000 {
        mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = g(mid);
        if v.abs() <= tol && tol > 0.0 {
            return mid;
        }
        if v < 0.0 {
            lo = mid;
        } else if v > 0.0 {
            hi = mid;
        } else {
            return mid;
        }
    }
    let (glo, ghi) = (g(lo).abs(), g(hi).abs());
    let gm = g(mid).abs();
    if gm <= glo && gm <= ghi {
        mid
    } else if glo <= ghi {
        lo
    } else {
        hi
    }
}

/// Evenly spaced grid with `round((max-min)/step)+1` points.
pub fn linspace_step(min: f64, max: f64, step: f64) -> Vec<f64> {
    let count = ((max - min) / step).round() as usize + 1;
    (0..count).map(|i| min + step * i as f64).collect()
}

/// Median of a sample; `NaN` for an empty slice.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().copied().collect::<CompensatedSum>().value() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss = xs
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .collect::<CompensatedSum>()
        .value();
    (mean, (ss / (n - 1.0) / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::new();
        s.add(1e16);
        for _ in 0..1000 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 1000.0);
    }

    #[test]
    fn log_sum_exp_two_terms() {
        let v = log_sum_exp(&[1.0, -1.0]);
        assert!((v - (1f64.exp() + (-1f64).exp()).ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, 2.0), 2.0);
    }

    #[test]
    fn upper_tail_matches_erfc_in_overlap() {
        for &z in &[5.0, 6.0, 8.0, 10.0, 20.0] {
            let direct = (0.5 * libm::erfc(z / SQRT_2)).ln();
            let cf = log_normal_upper_tail(z);
            assert!((direct - cf).abs() < 1e-10 * direct.abs(), "z={z}: {direct} vs {cf}");
        }
        // Far tail where erfc underflows.
        let z = 60.0;
        let approx = -0.5 * z * z - (z * (2.0 * PI).sqrt()).ln();
        assert!((log_normal_upper_tail(z) - approx).abs() < 1e-3);
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(4.0) - 0.999_968_328_758_166_9).abs() < 1e-12);
        assert!((normal_cdf(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-12);
    }

    #[test]
    fn bisection_finds_sqrt2() {
        let r = bisect_increasing(|t| t * t - 2.0, 0.0, 2.0, 0.0);
        assert!((r - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn grid_point_count() {
        assert_eq!(linspace_step(-3.0, 3.0, 0.01).len(), 601);
    }
}
