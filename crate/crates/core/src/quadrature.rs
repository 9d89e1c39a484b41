//! Adaptive Gauss-Kronrod quadrature and dyadic integration of integrands singular at zero.

use serde::{Deserialize, Serialize};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One 15-point Kronrod panel; returns (integral, error estimate).
fn kronrod_panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss-Kronrod integration of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (l, el) = kronrod_panel(f, a, m);
        let (r, er) = kronrod_panel(f, m, b);
        if depth == 0 || el + er <= tol || (l + r - whole).abs() <= 1e-3 * tol {
            l + r
        } else {
            recurse(f, a, m, l, 0.5 * tol, depth - 1) + recurse(f, m, b, r, 0.5 * tol, depth - 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let (whole, err) = kronrod_panel(&f, a, b);
    let tol = (rel_tol * whole.abs()).max(1e-300);
    if err <= tol {
        return whole;
    }
    recurse(&f, a, b, whole, tol, 40)
}

/// Result of integrating over dyadic levels `[u 2^{-k-1}, u 2^{-k}]` towards zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadicIntegral {
    pub value: f64,
    /// Cumulative sum after each level.
    pub partial_sums: Vec<f64>,
    /// Extrapolated contribution of the levels not evaluated.
    pub tail: f64,
    /// Fitted decay exponent `p` of the level contributions (`k^{-p}`), or infinity for
    /// geometric decay.
    pub decay_exponent: f64,
    pub convergent: bool,
}

/// Level contributions `F(k) - F(k+1)` of the tail model `F(k) = k^{1-p}/(p-1)`.
fn model_level(k: f64, p: f64) -> f64 {
    if (p - 1.0).abs() < 1e-12 {
        ((k + 1.0) / k).ln()
    } else {
        (k.powf(1.0 - p) - (k + 1.0).powf(1.0 - p)) / (p - 1.0)
    }
}

/// Integrates `g` over `(0, upper]` where `g` may be singular at zero.
///
/// Divergence is declared when the level contributions decay no faster than `k^{-1.02}`.
pub fn integrate_from_zero<F: Fn(f64) -> f64>(g: F, upper: f64, levels: usize) -> DyadicIntegral {
    let levels = levels.max(8);
    let mut contributions = Vec::with_capacity(levels);
    let mut partial_sums = Vec::with_capacity(levels);
    let mut acc = 0.0;
    for k in 0..levels {
        let hi = upper * 0.5f64.powi(k as i32);
        let a = integrate(&g, 0.5 * hi, hi, 1e-13);
        contributions.push(a);
        acc += a;
        partial_sums.push(acc);
    }
    let last = contributions[levels - 1];
    let prev = contributions[levels - 2];
    if last == 0.0 {
        return DyadicIntegral { value: acc, partial_sums, tail: 0.0, decay_exponent: f64::INFINITY, convergent: true };
    }
    let ratio = last / prev;
    let mid = levels / 2;
    let mid_ratio = contributions[mid] / contributions[mid - 1];
    // Geometric decay keeps a constant level ratio; polynomial decay drifts towards one.
    if ratio.abs() < 0.9 || ((ratio - mid_ratio).abs() <= 1e-4 && ratio < 1.0 - 1e-3) {
        let tail = last * ratio / (1.0 - ratio);
        return DyadicIntegral {
            value: acc + tail,
            partial_sums,
            tail,
            decay_exponent: f64::INFINITY,
            convergent: true,
        };
    }
    // Level k covers log2(1/s) in [k + k0, k + k0 + 1].
    let k0 = (1.0 / upper).log2().max(0.0);
    let h = levels / 2;
    let observed = contributions[h] / last;
    let (kh, kl) = (h as f64 + k0, (levels - 1) as f64 + k0);
    let (mut lo, mut hi) = (0.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if model_level(kh, mid) / model_level(kl, mid) < observed {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = 0.5 * (lo + hi);
    let convergent = p > 1.02 && acc.is_finite();
    let tail = if convergent {
        let scale = last / model_level(kl, p);
        scale * (kl + 1.0).powf(1.0 - p) / (p - 1.0)
    } else {
        f64::INFINITY
    };
    DyadicIntegral { value: acc + tail, partial_sums, tail, decay_exponent: p, convergent }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_integrals() {
        assert!((integrate(|x| x.sin(), 0.0, std::f64::consts::PI, 1e-12) - 2.0).abs() < 1e-12);
        assert!((integrate(|x| (-x * x).exp(), -6.0, 6.0, 1e-12) - std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn power_singularity() {
        let r = integrate_from_zero(|s| s.powf(-0.5), 1.0, 120);
        assert!(r.convergent);
        assert!((r.value - 2.0).abs() < 1e-10, "{}", r.value);
    }

    #[test]
    fn log_divergence_detected() {
        let r = integrate_from_zero(|s| 1.0 / (s * (std::f64::consts::E + 1.0 / s).ln()), 1.0, 120);
        assert!(!r.convergent);
        assert!(r.decay_exponent < 1.02);
    }

    #[test]
    fn slow_convergence_extrapolated() {
        // Integral of 1/(s log^2(1/s)) on (0, 1/2] equals 1/ln 2.
        let r = integrate_from_zero(|s| 1.0 / (s * (1.0 / s).ln().powi(2)), 0.5, 120);
        assert!(r.convergent);
        assert!((r.value - 1.0 / 2f64.ln()).abs() < 1e-4, "{}", r.value);
    }
}
