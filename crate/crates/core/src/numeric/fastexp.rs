//! Branchless polynomial exp for the softmax hot path.
//!
//! exp(x) = 2^k * exp(r) with k = round(x * log2(e)) and r = x - k*ln2,
//! |r| <= ln2/2. exp(r) is an 11-term Taylor series (remainder < 7e-15
//! relative on that interval); the 2^k scale is applied by exponent-bit
//! multiplication in two halves so subnormal results stay correct. Slice
//! processing vectorizes; results are bitwise reproducible.

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN_2_HI: f64 = 6.93147180369123816490e-01;
const LN_2_LO: f64 = 1.90821492927058770002e-10;

/// Largest |x| handled before clamping: exp(-746) underflows to 0 and
/// exp(710) overflows, as with the libm function.
const EXP_MIN: f64 = -745.0;
const EXP_MAX: f64 = 709.0;

/// Taylor tail after the leading 1/11! term, Horner order.
const COEFFS: [f64; 11] = [
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
    1.0,
    1.0,
];

const LANES: usize = 4;

/// Lanewise exp over a fixed-width block; identical arithmetic per lane to
/// `exp_core`, laid out so LLVM vectorizes it.
#[inline]
fn exp_lanes(xs: &mut [f64; LANES]) {
    let mut k = [0.0f64; LANES];
    let mut r = [0.0f64; LANES];
    for l in 0..LANES {
        let x = xs[l].clamp(EXP_MIN, EXP_MAX);
        k[l] = (x * LOG2_E).round();
        r[l] = (x - k[l] * LN_2_HI) - k[l] * LN_2_LO;
    }
    let mut p = [1.0 / 39_916_800.0; LANES];
    for &c in COEFFS.iter() {
        for l in 0..LANES {
            p[l] = p[l] * r[l] + c;
        }
    }
    for l in 0..LANES {
        let ki = k[l] as i64;
        let k1 = ki >> 1;
        let k2 = ki - k1;
        let s1 = f64::from_bits(((k1 + 1023) as u64) << 52);
        let s2 = f64::from_bits(((k2 + 1023) as u64) << 52);
        xs[l] = p[l] * s1 * s2;
    }
}

#[inline]
fn exp_core(x: f64) -> f64 {
    let x = x.clamp(EXP_MIN, EXP_MAX);
    let k = (x * LOG2_E).round();
    // r = x - k*ln2 in two pieces for accuracy
    let r = (x - k * LN_2_HI) - k * LN_2_LO;
    let mut p = 1.0 / 39_916_800.0; // 1/11!
    for &c in COEFFS.iter() {
        p = p * r + c;
    }
    let k = k as i64;
    let k1 = k >> 1;
    let k2 = k - k1;
    let s1 = f64::from_bits(((k1 + 1023) as u64) << 52);
    let s2 = f64::from_bits(((k2 + 1023) as u64) << 52);
    p * s1 * s2
}

/// exp over a slice, in place. Block and tail elements go through the same
/// per-element arithmetic, so results do not depend on slice length.
pub fn exp_slice(xs: &mut [f64]) {
    let mut chunks = xs.chunks_exact_mut(LANES);
    for chunk in &mut chunks {
        let block: &mut [f64; LANES] = chunk.try_into().unwrap();
        exp_lanes(block);
    }
    for x in chunks.into_remainder() {
        *x = exp_core(*x);
    }
}

/// Four-lane maximum; a single fold is a latency chain.
pub fn slice_max(xs: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; 4];
    let main = xs.len() & !3;
    for chunk in xs[..main].chunks_exact(4) {
        for l in 0..4 {
            acc[l] = acc[l].max(chunk[l]);
        }
    }
    let mut m = acc[0].max(acc[1]).max(acc[2]).max(acc[3]);
    for &x in &xs[main..] {
        m = m.max(x);
    }
    m
}

/// Four-lane sum, fixed association for determinism.
pub fn slice_sum(xs: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let main = xs.len() & !3;
    for chunk in xs[..main].chunks_exact(4) {
        for l in 0..4 {
            acc[l] += chunk[l];
        }
    }
    let mut tail = 0.0;
    for &x in &xs[main..] {
        tail += x;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Softmax of one row in place: max subtraction, fast exp, normalize.
pub fn softmax_row(row: &mut [f64]) {
    let max = slice_max(row);
    for x in row.iter_mut() {
        *x -= max;
    }
    exp_slice(row);
    let inv = 1.0 / slice_sum(row);
    for x in row.iter_mut() {
        *x *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_libm_exp_closely() {
        let mut worst = 0.0f64;
        for i in 0..200_000 {
            let x = -40.0 + i as f64 * (80.0 / 200_000.0);
            let got = exp_core(x);
            let want = x.exp();
            let rel = (got - want).abs() / want;
            if rel > worst {
                worst = rel;
            }
        }
        assert!(worst < 5e-14, "worst rel err {worst}");
    }

    #[test]
    fn extremes_stay_finite_and_tiny() {
        // deep negative clamps into the subnormal range, never NaN/inf/negative
        let deep = exp_core(-800.0);
        assert!(deep >= 0.0 && deep < 1e-300);
        assert!(exp_core(800.0).is_finite()); // clamped, no inf
        assert_eq!(exp_core(0.0), 1.0);
        for &x in &[-700.0, -730.0, -744.0] {
            let v = exp_core(x);
            assert!(v >= 0.0 && v < 1e-300);
        }
    }

    #[test]
    fn softmax_row_normalizes() {
        let mut row = vec![1000.0, 0.0, -55.0];
        softmax_row(&mut row);
        assert!(row.iter().all(|&v| v.is_finite() && v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((row[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_bits() {
        let a = exp_core(-3.14159);
        let b = exp_core(-3.14159);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
