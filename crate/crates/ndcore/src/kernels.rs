//! Dense matrix kernels. All three variants accumulate into `c`.
//!
//! On x86_64 hosts with AVX2+FMA the same loops are compiled a second time
//! with those features enabled and selected at runtime. The choice is fixed
//! per process, so results are reproducible on a given machine.

use std::sync::OnceLock;

fn fused_available() -> bool {
    static FUSED: OnceLock<bool> = OnceLock::new();
    *FUSED.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            false
        }
    })
}

const MR: usize = 4;
const NR: usize = 8;

#[inline(always)]
fn fma<const FUSED: bool>(acc: f64, a: f64, b: f64) -> f64 {
    if FUSED {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

/// Register-tiled `c += op(a) · b` where `a(i, p)` is read as
/// `a[i * a_row + p * a_col]`. Each output element accumulates over `p` in
/// increasing order, starting from its existing value.
#[inline(always)]
fn tiled<const FUSED: bool>(m: usize, k: usize, n: usize, a: &[f64], a_row: usize, a_col: usize, b: &[f64], c: &mut [f64]) {
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0; NR]; MR];
            for r in 0..MR {
                acc[r].copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for p in 0..k {
                let bp: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for r in 0..MR {
                    let av = a[(i + r) * a_row + p * a_col];
                    for q in 0..NR {
                        acc[r][q] = fma::<FUSED>(acc[r][q], av, bp[q]);
                    }
                }
            }
            for r in 0..MR {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(&acc[r]);
            }
            j += NR;
        }
        if j < n {
            edge::<FUSED>(i, i + MR, j, n, k, n, a, a_row, a_col, b, c);
        }
        i += MR;
    }
    if i < m {
        edge::<FUSED>(i, m, 0, n, k, n, a, a_row, a_col, b, c);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn edge<const FUSED: bool>(
    i0: usize,
    i1: usize,
    j0: usize,
    j1: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_row: usize,
    a_col: usize,
    b: &[f64],
    c: &mut [f64],
) {
    for i in i0..i1 {
        for j in j0..j1 {
            let mut acc = c[i * n + j];
            for p in 0..k {
                acc = fma::<FUSED>(acc, a[i * a_row + p * a_col], b[p * n + j]);
            }
            c[i * n + j] = acc;
        }
    }
}

#[inline(always)]
fn nn_body<const FUSED: bool>(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    tiled::<FUSED>(m, k, n, a, k, 1, b, c)
}

#[inline(always)]
fn tn_body<const FUSED: bool>(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    tiled::<FUSED>(m, k, n, a, 1, m, b, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn nn_fused(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    nn_body::<true>(m, k, n, a, b, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn tn_fused(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    tn_body::<true>(m, k, n, a, b, c)
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    if fused_available() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { nn_fused(m, k, n, a, b, c) };
        return;
    }
    nn_body::<false>(m, k, n, a, b, c)
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    if fused_available() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { tn_fused(m, k, n, a, b, c) };
        return;
    }
    tn_body::<false>(m, k, n, a, b, c)
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c)
}

/// Transpose of a row-major `rows × cols` matrix.
pub fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// `e^x` by range reduction to `|r| <= ln2/2` and a degree-13 Taylor
/// polynomial; within a few ulp of the libm result on `[-708, 709]`, and
/// clamped to that range. Branch-free so loops over it vectorise.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let x = x.clamp(-708.0, 709.0);
    let t = x * LOG2E + SHIFTER;
    let n = t - SHIFTER;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
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
    ] {
        p = p * r + c;
    }
    // The low mantissa bits of `t` hold `n`; move them into the exponent.
    let bits = (t.to_bits().wrapping_add(1023) & 0x7ff) << 52;
    p * f64::from_bits(bits)
}

#[inline(always)]
fn exp_slice_body(xs: &mut [f64], shift: f64) {
    for x in xs.iter_mut() {
        *x = exp(*x - shift);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn exp_slice_fused(xs: &mut [f64], shift: f64) {
    exp_slice_body(xs, shift)
}

/// `x <- e^(x - shift)` elementwise with [`exp`].
pub fn exp_shifted(xs: &mut [f64], shift: f64) {
    #[cfg(target_arch = "x86_64")]
    if fused_available() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { exp_slice_fused(xs, shift) };
        return;
    }
    exp_slice_body(xs, shift)
}
