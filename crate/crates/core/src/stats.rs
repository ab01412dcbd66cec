//! Normal distribution helpers and the exact binomial confidence bound used by
//! certification. Everything here is `f64`.

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// `Phi(x) = erfc(-x / sqrt 2) / 2`, accurate in relative terms in the lower tail.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

// Acklam's rational approximation of the normal quantile (relative error about 1.2e-9).
const A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];
const P_LOW: f64 = 0.024_25;

fn acklam_lower(q: f64) -> f64 {
    if q < P_LOW {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    } else {
        let r = q - 0.5;
        let s = r * r;
        (((((A[0] * s + A[1]) * s + A[2]) * s + A[3]) * s + A[4]) * s + A[5]) * r
            / (((((B[0] * s + B[1]) * s + B[2]) * s + B[3]) * s + B[4]) * s + 1.0)
    }
}

/// Inverse standard normal CDF.
///
/// Acklam's rational approximation gives a starting point in the lower tail
/// (`q = min(p, 1 - p)`, which is exact in floating point for `p >= 1/2`), then
/// two Halley steps against `Phi` computed from `erfc` bring `|Phi(x) - p|`
/// below 1e-12.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain {
            name: "p",
            value: p,
            domain: "(0, 1)",
        });
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let upper = p > 0.5;
    let q = if upper { 1.0 - p } else { p };
    let mut x = acklam_lower(q);
    for _ in 0..2 {
        let e = std_normal_cdf(x) - q;
        let u = e * SQRT_2PI * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(if upper { -x } else { x })
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`, summed exactly over `j = k..=n`.
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let ln_fact = LnFactorials::new(n);
    upper_tail_with(&ln_fact, k, n, p)
}

struct LnFactorials(Vec<f64>);

impl LnFactorials {
    fn new(n: u64) -> Self {
        Self((0..=n).map(|j| libm::lgamma(j as f64 + 1.0)).collect())
    }

    fn ln_choose(&self, n: u64, j: u64) -> f64 {
        self.0[n as usize] - self.0[j as usize] - self.0[(n - j) as usize]
    }
}

fn upper_tail_with(lf: &LnFactorials, k: u64, n: u64, p: f64) -> f64 {
    let lp = p.ln();
    let lq = (-p).ln_1p();
    let terms: Vec<f64> = (k..=n)
        .map(|j| lf.ln_choose(n, j) + j as f64 * lp + (n - j) as f64 * lq)
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    (max + sum.ln()).exp().min(1.0)
}

/// One-sided Clopper-Pearson lower confidence limit.
///
/// Returns the `p` solving `P(Binomial(n, p) >= k) = alpha` (0 when `k = 0`),
/// found by bisection on the exact binomial tail until the bracket stops
/// shrinking, which is far below the 1e-10 target.
pub fn clopper_pearson_lower(k: u64, n: u64, alpha: f64) -> Result<f64> {
    if n == 0 || k > n {
        return Err(Error::InvalidConfig(format!(
            "clopper-pearson needs 0 <= k <= n and n >= 1, got k={k} n={n}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain {
            name: "alpha_cert",
            value: alpha,
            domain: "(0, 1)",
        });
    }
    if k == 0 {
        return Ok(0.0);
    }
    let lf = LnFactorials::new(n);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if upper_tail_with(&lf, k, n, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `sigma * Phi^-1(p_lower)` for `p_lower > 1/2`; otherwise [`Error::NotCertifiable`].
pub fn certified_radius(p_lower: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain {
            name: "sigma",
            value: sigma,
            domain: "(0, inf)",
        });
    }
    if !(p_lower > 0.5) {
        return Err(Error::NotCertifiable { p_lower });
    }
    Ok(sigma * std_normal_quantile(p_lower)?)
}
