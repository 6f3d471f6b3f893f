//! Row log-sum-exp kernels for the Sinkhorn soft-min.
//!
//! Each row computes `log sum_j exp(h_j - |x - y_j|^2 / 2)` in two passes
//! (terms and max, then shifted exponentials). Reductions use a fixed number
//! of accumulator lanes combined in a fixed order, so the result is the same
//! whichever instruction set the row is compiled for.

const LANES: usize = 16;

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
// 1.5 * 2^52: adding it rounds to the nearest integer and leaves that
// integer in the low mantissa bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;
// Below this the result is under 1e-304 and is flushed to a tiny normal.
const EXP_FLOOR: f64 = -700.0;

/// `exp(t)` for `t <= 0`, branch-free so it vectorizes.
///
/// Cody-Waite reduction `t = k ln 2 + r`, `|r| <= ln 2 / 2`, then a degree-13
/// Taylor polynomial (truncation below 1e-17 relative) scaled by `2^k` built
/// directly in the exponent bits.
#[inline(always)]
pub(crate) fn exp_nonpositive(t: f64) -> f64 {
    let t = if t < EXP_FLOOR { EXP_FLOOR } else { t };
    let y = t * LOG2E + ROUND_MAGIC;
    let k = y - ROUND_MAGIC;
    let r = (t - k * LN2_HI) - k * LN2_LO;
    // Estrin evaluation of sum_{i<=13} r^i / i! (shorter dependency chains
    // than Horner).
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let p01 = 1.0 + r;
    let p23 = 0.5 + r * (1.0 / 6.0);
    let p45 = 1.0 / 24.0 + r * (1.0 / 120.0);
    let p67 = 1.0 / 720.0 + r * (1.0 / 5_040.0);
    let p89 = 1.0 / 40_320.0 + r * (1.0 / 362_880.0);
    let p1011 = 1.0 / 3_628_800.0 + r * (1.0 / 39_916_800.0);
    let p1213 = 1.0 / 479_001_600.0 + r * (1.0 / 6_227_020_800.0);
    let q0 = p01 + p23 * r2;
    let q1 = p45 + p67 * r2;
    let q2 = p89 + p1011 * r2;
    let p = (q0 + q1 * r4) + (q2 + p1213 * r4) * r8;
    let scale = f64::from_bits(y.to_bits().wrapping_add(1023) << 52);
    p * scale
}

#[inline(always)]
fn combine(acc: [f64; LANES]) -> f64 {
    let mut v = acc;
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for k in 0..width {
            v[k] += v[k + width];
        }
    }
    v[0]
}

#[inline(always)]
fn combine_max(acc: [f64; LANES]) -> f64 {
    acc.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[inline(always)]
fn lane_max(a: f64, b: f64) -> f64 {
    if b > a {
        b
    } else {
        a
    }
}

/// Second pass: `max + log sum_j exp(buf_j - max)`.
#[inline(always)]
fn finish(buf: &[f64], max: f64) -> f64 {
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut acc = [0.0; LANES];
    let chunks = buf.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        let c: &[f64; LANES] = c.try_into().unwrap();
        for k in 0..LANES {
            acc[k] += exp_nonpositive(c[k] - max);
        }
    }
    let mut tail = 0.0;
    for &t in rest {
        tail += exp_nonpositive(t - max);
    }
    max + (combine(acc) + tail).ln()
}

#[inline(always)]
fn term<const D: usize>(x: &[f64; D], y: &[f64], hj: f64) -> f64 {
    let mut s = 0.0;
    for a in 0..D {
        let d = x[a] - y[a];
        s += d * d;
    }
    hj - 0.5 * s
}

#[inline(always)]
fn lse_fixed<const D: usize>(x: &[f64], b: &[f64], h: &[f64], buf: &mut Vec<f64>) -> f64 {
    let x: &[f64; D] = x.try_into().unwrap();
    let m = h.len();
    debug_assert_eq!(b.len(), m * D);
    buf.clear();
    buf.resize(m, 0.0);
    let mut mx = [f64::NEG_INFINITY; LANES];
    let full = m - m % LANES;
    for ((yc, hc), bc) in b[..full * D]
        .chunks_exact(LANES * D)
        .zip(h[..full].chunks_exact(LANES))
        .zip(buf[..full].chunks_exact_mut(LANES))
    {
        let hc: &[f64; LANES] = hc.try_into().unwrap();
        let bc: &mut [f64; LANES] = bc.try_into().unwrap();
        for k in 0..LANES {
            let t = term::<D>(x, &yc[k * D..(k + 1) * D], hc[k]);
            bc[k] = t;
            mx[k] = lane_max(mx[k], t);
        }
    }
    let mut max = combine_max(mx);
    for j in full..m {
        let t = term::<D>(x, &b[j * D..(j + 1) * D], h[j]);
        buf[j] = t;
        max = lane_max(max, t);
    }
    finish(buf, max)
}

#[inline(always)]
fn lse_dyn(x: &[f64], b: &[f64], h: &[f64], buf: &mut Vec<f64>) -> f64 {
    let d = x.len();
    buf.clear();
    let mut max = f64::NEG_INFINITY;
    for (y, &hj) in b.chunks_exact(d).zip(h) {
        let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        let t = hj - 0.5 * s;
        max = lane_max(max, t);
        buf.push(t);
    }
    finish(buf, max)
}

#[inline(always)]
fn row_lse_generic(x: &[f64], b: &[f64], h: &[f64], buf: &mut Vec<f64>) -> f64 {
    match x.len() {
        1 => lse_fixed::<1>(x, b, h, buf),
        2 => lse_fixed::<2>(x, b, h, buf),
        3 => lse_fixed::<3>(x, b, h, buf),
        _ => lse_dyn(x, b, h, buf),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn row_lse_avx2(x: &[f64], b: &[f64], h: &[f64], buf: &mut Vec<f64>) -> f64 {
    row_lse_generic(x, b, h, buf)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn row_lse_avx512(x: &[f64], b: &[f64], h: &[f64], buf: &mut Vec<f64>) -> f64 {
    row_lse_generic(x, b, h, buf)
}

/// `log sum_j exp(h_j - |x - y_j|^2 / 2)` where `y_j` are the rows of `b`.
///
/// `buf` is scratch space of length `h.len()`.
pub(crate) fn row_lse(x: &[f64], b: &[f64], h: &[f64], buf: &mut Vec<f64>) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { row_lse_avx512(x, b, h, buf) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { row_lse_avx2(x, b, h, buf) };
        }
    }
    row_lse_generic(x, b, h, buf)
}
