//! Complementary error function and its scaled form.
//!
//! `erfcx(x) = exp(x²)·erfc(x)` stays O(1/x) for large positive `x`, which is
//! what every erfc-based score in [`crate::neighborhood`] is rearranged
//! around. The plain `erfc` product form underflows near `x ≈ 26.5`.

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Switch from `exp(x²)·erfc(x)` to the continued fraction.
const CF_THRESHOLD: f64 = 10.0;
const CF_TERMS: usize = 60;

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// `exp(x²)` with the rounding error of `x²` folded back in.
fn exp_sq(x: f64) -> f64 {
    let hi = x * x;
    let lo = x.mul_add(x, -hi);
    hi.exp() * (1.0 + lo)
}

/// Scaled complementary error function `exp(x²)·erfc(x)`.
///
/// Finite for every `x > -26.6`; overflows to `+inf` below that.
pub fn erfcx(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 * exp_sq(x) - erfcx(-x);
    }
    if x < CF_THRESHOLD {
        return exp_sq(x) * erfc(x);
    }
    if x.is_infinite() {
        return 0.0;
    }
    // erfcx(x) = 1/√π · 1/(x + (1/2)/(x + (2/2)/(x + (3/2)/(x + ...))))
    let mut tail = x;
    for n in (1..=CF_TERMS).rev() {
        tail = x + (n as f64 / 2.0) / tail;
    }
    FRAC_1_SQRT_PI / tail
}

/// `ln erfcx(x)`, finite for all finite `x`.
///
/// For negative arguments this is `x² + ln erfc(x)`, where `erfc(x)` lies in
/// `(1, 2]`, so nothing overflows even when `erfcx(x)` itself would.
pub fn ln_erfcx(x: f64) -> f64 {
    if x >= 0.0 {
        erfcx(x).ln()
    } else {
        x * x + erfc(x).ln()
    }
}

/// `√π`, exposed for the neighborhood formulas.
pub const SQRT_PI: f64 = 1.772_453_850_905_516;
