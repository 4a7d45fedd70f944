//! Branch-free elementwise kernels.
//!
//! glibc's `tanh` dominates training profiles once matmul is fast, and it does
//! not vectorize. The version here is written as straight-line code so LLVM can
//! vectorize slice loops over it; it stays within a few ulp of the libm result.

const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;

// Rational approximation on |x| < 0.625 (Cephes).
const P: [f64; 3] = [
    -9.643_991_794_250_522_386_28e-1,
    -9.928_772_310_019_185_865_64e1,
    -1.614_687_684_417_084_479_52e3,
];
const Q: [f64; 3] = [
    1.128_116_784_916_329_314_02e2,
    2.235_488_390_601_004_485_83e3,
    4.844_063_053_251_254_860_48e3,
];

/// `exp(y)` for `y` in `[0, 41]`; no range handling.
#[inline(always)]
fn exp_bounded(y: f64) -> f64 {
    let t = y * std::f64::consts::LOG2_E + SHIFTER;
    let k = t - SHIFTER;
    let r = (y - k * LN2_HI) - k * LN2_LO;
    // Taylor series to degree 13 on |r| <= ln2/2.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // The low mantissa bits of `t` hold k; move k + 1023 into the exponent.
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    p * scale
}

#[inline(always)]
pub(crate) fn tanh(x: f64) -> f64 {
    let ax = x.abs();
    let z = x * x;
    let num = (P[0] * z + P[1]) * z + P[2];
    let den = ((z + Q[0]) * z + Q[1]) * z + Q[2];
    let small = x + x * z * (num / den);
    let e = exp_bounded(2.0 * ax.min(20.0));
    let large = 1.0 - 2.0 / (e + 1.0);
    // tanh is odd; copysign also keeps the sign of -0.0.
    let y = if ax < 0.625 { small.abs() } else { large }.copysign(x);
    if x.is_nan() {
        x
    } else {
        y
    }
}

fn tanh_slice_generic(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| tanh(x)).collect()
}

// Same code compiled for wider vectors. No fused multiply-add is introduced
// (Rust never contracts `a * b + c`), so results are bit-identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tanh_slice_avx2(xs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    for (o, &x) in out.spare_capacity_mut().iter_mut().zip(xs) {
        o.write(tanh(x));
    }
    // SAFETY: the loop above wrote all `xs.len()` elements.
    unsafe { out.set_len(xs.len()) };
    out
}

pub(crate) fn tanh_slice(xs: &[f64]) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { tanh_slice_avx2(xs) };
    }
    tanh_slice_generic(xs)
}
