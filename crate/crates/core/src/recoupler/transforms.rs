//! Scalar distribution transforms: Gaussian to uniform, the CDF of a
//! product of two independent uniforms, and the normal quantile.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Result, WsdfError};

/// Clamp applied to uniforms so the quantile never returns an infinity.
pub const UNIFORM_EPS: f64 = 1e-7;

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// erf by its everywhere-positive series; accurate for |y| < ~4.
fn erf_series(y: f64) -> f64 {
    let y2 = 2.0 * y * y;
    let mut term = y;
    let mut sum = y;
    let mut n = 0.0;
    while term.abs() > 1e-17 * sum.abs() {
        n += 1.0;
        term *= y2 / (2.0 * n + 1.0);
        sum += term;
        if n > 500.0 {
            break;
        }
    }
    FRAC_2_SQRT_PI * (-y * y).exp() * sum
}

/// erfc(y) for y >= 3 by backward evaluation of its continued fraction.
fn erfc_continued_fraction(y: f64) -> f64 {
    let mut f = y;
    for k in (1..=80).rev() {
        f = y + (k as f64 * 0.5) / f;
    }
    (-y * y).exp() / (PI.sqrt() * f)
}

fn erfc(y: f64) -> f64 {
    if y >= 3.0 {
        erfc_continued_fraction(y)
    } else if y <= -3.0 {
        2.0 - erfc_continued_fraction(-y)
    } else {
        1.0 - erf_series(y)
    }
}

/// Unclamped standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    let y = x * FRAC_1_SQRT_2;
    if y.abs() < 3.0 {
        0.5 * (1.0 + erf_series(y))
    } else {
        0.5 * erfc(-y)
    }
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `Φ(x)` clamped to `[ε, 1 − ε]`.
pub fn gaussian_to_uniform(x: f64) -> f64 {
    normal_cdf(x).clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
}

/// Derivative of [`gaussian_to_uniform`]; zero on the clamped tails.
pub fn gaussian_to_uniform_deriv(x: f64) -> f64 {
    let u = normal_cdf(x);
    if !(UNIFORM_EPS..=1.0 - UNIFORM_EPS).contains(&u) {
        0.0
    } else {
        normal_pdf(x)
    }
}

/// CDF of `U1 · U2` for independent `U(0, 1)` variables: `p (1 − ln p)`.
pub fn product_uniform_cdf(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(WsdfError::Domain(format!("product CDF argument {p} outside [0, 1]")));
    }
    Ok(product_cdf_unchecked(p))
}

fn product_cdf_unchecked(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (1.0 - p.ln())
    }
}

/// Standard normal quantile (Wichura's AS 241, PPND16).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&AS241_A, r) / poly(&AS241_B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        poly(&AS241_C, r) / poly(&AS241_D, r)
    } else {
        r -= 5.0;
        poly(&AS241_E, r) / poly(&AS241_F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

fn poly(coef: &[f64; 8], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

const AS241_A: [f64; 8] = [
    3.387_132_872_796_366_5,
    133.141_667_891_784_38,
    1_971.590_950_306_551_3,
    13_731.693_765_509_46,
    45_921.953_931_549_87,
    67_265.770_927_008_7,
    33_430.575_583_588_13,
    2_509.080_928_730_122_7,
];
const AS241_B: [f64; 8] = [
    1.0,
    42.313_330_701_600_91,
    687.187_007_492_057_9,
    5_394.196_021_424_751,
    21_213.794_301_586_597,
    39_307.895_800_092_71,
    28_729.085_735_721_943,
    5_226.495_278_852_854,
];
const AS241_C: [f64; 8] = [
    1.423_437_110_749_683_5,
    4.630_337_846_156_546,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    0.241_780_725_177_450_6,
    0.022_723_844_989_269_184,
    7.745_450_142_783_414e-4,
];
const AS241_D: [f64; 8] = [
    1.0,
    2.053_191_626_637_759,
    1.676_384_830_183_803_8,
    0.689_767_334_985_1,
    0.148_103_976_427_480_08,
    0.015_198_666_563_616_457,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
const AS241_E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    0.296_560_571_828_504_87,
    0.026_532_189_526_576_124,
    0.001_242_660_947_388_078_4,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const AS241_F: [f64; 8] = [
    1.0,
    0.599_832_206_555_888,
    0.136_929_880_922_735_8,
    0.014_875_361_290_850_615,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];

fn clamp_product(p: f64) -> f64 {
    p.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
}

fn is_clamped(p: f64) -> bool {
    !(UNIFORM_EPS..=1.0 - UNIFORM_EPS).contains(&p)
}

/// `Φ⁻¹(F(p))`: maps a product of two uniforms back to a standard normal.
pub fn product_to_normal(p: f64) -> f64 {
    normal_quantile(product_cdf_unchecked(clamp_product(p)))
}

/// d/dp of [`product_to_normal`]: `−ln p / φ(n)`, zero where clamped.
pub fn product_to_normal_deriv(p: f64) -> f64 {
    if is_clamped(p) {
        return 0.0;
    }
    let n = product_to_normal(p);
    -p.ln() / normal_pdf(n)
}

/// Second derivative: `−1 / (p φ(n)) + n g²` with `g` the first derivative.
pub fn product_to_normal_second_deriv(p: f64) -> f64 {
    if is_clamped(p) {
        return 0.0;
    }
    let n = product_to_normal(p);
    let pdf = normal_pdf(n);
    let g = -p.ln() / pdf;
    -1.0 / (p * pdf) + n * g * g
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn cdf_symmetry_and_known_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        for &x in &[0.1, 0.7, 1.9, 2.5, 3.3, 4.5, 6.0, 8.0] {
            assert!((normal_cdf(-x) - (1.0 - normal_cdf(x))).abs() < 1e-15);
        }
    }

    /// Simpson quadrature of the density from 0 as an independent route.
    #[test]
    fn cdf_matches_quadrature_oracle() {
        for &x in &[0.3, 1.0, 2.2, 3.0, 4.4, 5.1] {
            let n = 20_000;
            let h = x / n as f64;
            let mut s = normal_pdf(0.0) + normal_pdf(x);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * normal_pdf(i as f64 * h);
            }
            let quad = 0.5 + s * h / 3.0;
            assert!((normal_cdf(x) - quad).abs() < 1e-12, "x={x}");
        }
    }

    /// Reference values from 30-digit arbitrary-precision evaluation.
    #[test]
    fn cdf_matches_high_precision_table() {
        let table = [
            (-7.5, 3.190_891_672_910_896e-14),
            (-5.0, 2.866_515_718_791_939e-7),
            (-3.0, 0.001_349_898_031_630_094_5),
            (-1.99, 0.023_295_467_750_211_822),
            (-0.5, 0.308_537_538_725_986_9),
            (0.25, 0.598_706_325_682_923_7),
            (2.0, 0.977_249_868_051_820_8),
            (4.2, 0.999_986_654_250_984_1),
            (6.0, 0.999_999_999_013_412_4),
        ];
        for (x, p) in table {
            assert!((normal_cdf(x) - p).abs() < 1e-15, "x={x}");
        }
    }

    #[test]
    fn quantile_agrees_with_statrs_and_inverts_cdf() {
        let n = Normal::standard();
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let q = normal_quantile(p);
            assert!((q - n.inverse_cdf(p)).abs() < 1e-7, "p={p}");
            assert!((normal_cdf(q) - p).abs() < 1e-6);
        }
        for &p in &[1e-12, 1e-9, 1e-5, 1.0 - 1e-5, 1.0 - 1e-9] {
            assert!((normal_cdf(normal_quantile(p)) - p).abs() < 1e-6 * p.min(1.0 - p).max(1e-12) + 1e-15);
        }
        assert_eq!(normal_quantile(0.5), 0.0);
    }

    #[test]
    fn product_cdf_closed_forms_and_domain() {
        assert_eq!(product_uniform_cdf(1.0).unwrap(), 1.0);
        assert_eq!(product_uniform_cdf(0.0).unwrap(), 0.0);
        let e_inv = (-1.0f64).exp();
        assert!((product_uniform_cdf(e_inv).unwrap() - 2.0 * e_inv).abs() < 1e-15);
        assert!(product_uniform_cdf(-0.1).is_err());
        assert!(product_uniform_cdf(1.1).is_err());
    }

    #[test]
    fn product_to_normal_hits_zero_at_median() {
        // bisection for F(p) = 0.5
        let (mut lo, mut hi) = (1e-9, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if product_cdf_unchecked(mid) < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let p = 0.5 * (lo + hi);
        assert!((p - 0.187).abs() < 1e-3);
        assert!(product_to_normal(p).abs() < 1e-9);
    }

    #[test]
    fn product_to_normal_is_monotone_with_matching_derivatives() {
        let mut prev = f64::NEG_INFINITY;
        for i in 1..2000 {
            let p = i as f64 / 2000.0;
            let y = product_to_normal(p);
            assert!(y > prev);
            prev = y;
            let h = 1e-6 * p.min(1.0 - p);
            let fd = (product_to_normal(p + h) - product_to_normal(p - h)) / (2.0 * h);
            let d = product_to_normal_deriv(p);
            assert!((fd - d).abs() < 1e-4 * d.abs().max(1.0), "p={p}: {fd} vs {d}");
            let fd2 = (product_to_normal_deriv(p + h) - product_to_normal_deriv(p - h)) / (2.0 * h);
            let d2 = product_to_normal_second_deriv(p);
            assert!((fd2 - d2).abs() < 1e-3 * d2.abs().max(1.0), "p={p}: {fd2} vs {d2}");
        }
    }

    #[test]
    fn clamped_regions_are_flat() {
        assert_eq!(gaussian_to_uniform(-40.0), UNIFORM_EPS);
        assert_eq!(gaussian_to_uniform(40.0), 1.0 - UNIFORM_EPS);
        assert_eq!(gaussian_to_uniform_deriv(9.0), 0.0);
        assert_eq!(product_to_normal_deriv(1e-9), 0.0);
    }
}
