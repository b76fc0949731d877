//! Flat-slice numeric kernels backing the tape operations.
//!
//! Matrix products delegate to `matrixmultiply::dgemm` (stride tricks cover
//! the transposed variants zero-copy); everything else is plain loops the
//! compiler auto-vectorizes. All kernels are deterministic: fixed shapes and
//! inputs always produce identical bytes, which the tape's replay invariant
//! relies on.

/// C[m,n] = A[m,k] · B[n,k]ᵀ — both operands row-major, B indexed by rows.
pub fn matmul_abt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A[m,k] · B[k,n] — row-major.
pub fn matmul_ab(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[n,k] = A[m,n]ᵀ · B[m,k] — the accumulated-outer-product pattern.
pub fn matmul_atb(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(c.len(), n * k);
    if n == 0 || k == 0 {
        return;
    }
    if m == 0 {
        c.fill(0.0);
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            k,
            1.0,
            a.as_ptr(),
            1,
            n as isize,
            b.as_ptr(),
            k as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

// --- transcendentals ---------------------------------------------------

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN_2_HI: f64 = 6.931471803691238e-1;
const LN_2_LO: f64 = 1.9082149292705877e-10;

/// exp(x) via Cody–Waite range reduction and a degree-12 Taylor kernel,
/// branch-free so the compiler can vectorize it. Inputs are clamped to
/// [-708, 709]; relative error stays within a few ulps of `f64::exp`.
#[inline]
pub fn fast_exp(x: f64) -> f64 {
    let x = x.clamp(-708.0, 709.0);
    let kf = (x * LOG2_E).round();
    let r = (x - kf * LN_2_HI) - kf * LN_2_LO;
    // Taylor to r^12/12!; |r| ≤ ln2/2 keeps the truncation below 2e-16.
    let mut p = 1.0 / 479_001_600.0;
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
    let bits = (((kf as i64) + 1023) as u64) << 52;
    p * f64::from_bits(bits)
}

/// tanh(x) as (e^{2x}−1)/(e^{2x}+1) on the clamped argument; exact at 0,
/// saturates to ±1 beyond |x| ≈ 19 just like the libm function. Absolute
/// error vs `f64::tanh` is below 4e-15 (asserted by a dense-grid test);
/// the speed matters because training evaluates tanh tens of billions of
/// times.
#[inline]
pub fn fast_tanh(x: f64) -> f64 {
    let t = fast_exp(2.0 * x.clamp(-19.0, 19.0));
    (t - 1.0) / (t + 1.0)
}

pub fn vtanh(xs: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = fast_tanh(x);
    }
}

/// Numerically stable softplus ln(1+eˣ).
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// --- reductions and row helpers ----------------------------------------

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sqnorm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// out[j] = Σ_b x[b,j] for x of shape [rows, cols].
pub fn sum_rows(x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), cols);
    out.fill(0.0);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// out[b] = a[b,:]·c[b,:].
pub fn row_inner(a: &[f64], c: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(c.len(), rows * cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        out[r] = dot(&a[r * cols..(r + 1) * cols], &c[r * cols..(r + 1) * cols]);
    }
}

/// out[b,:] = x[b,:] * s[b].
pub fn row_scale(x: &[f64], s: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(s.len(), rows);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let f = s[r];
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        for (d, v) in dst.iter_mut().zip(src) {
            *d = v * f;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_abt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
            }
        }
        c
    }

    fn pseudo(seq: usize) -> Vec<f64> {
        // deterministic quasi-random fill, no RNG dependency in this layer
        (0..seq)
            .map(|i| ((i * 2_654_435_761 + 12_345) % 10_007) as f64 / 10_007.0 - 0.5)
            .collect()
    }

    #[test]
    fn gemm_variants_match_naive() {
        let (m, n, k) = (17, 13, 29);
        let a = pseudo(m * k);
        let b = pseudo(n * k);
        let mut c = vec![0.0; m * n];
        matmul_abt(&a, &b, &mut c, m, n, k);
        let reference = naive_abt(&a, &b, m, n, k);
        for (x, y) in c.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }

        // A·B via A·(Bᵀ)ᵀ consistency
        let b_rm = pseudo(k * n);
        let mut c2 = vec![0.0; m * n];
        matmul_ab(&a, &b_rm, &mut c2, m, n, k);
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b_rm[i * n + j];
            }
        }
        let r2 = naive_abt(&a, &bt, m, n, k);
        for (x, y) in c2.iter().zip(&r2) {
            assert!((x - y).abs() < 1e-12);
        }

        // AᵀB
        let a2 = pseudo(m * n);
        let b2 = pseudo(m * k);
        let mut c3 = vec![0.0; n * k];
        matmul_atb(&a2, &b2, &mut c3, m, n, k);
        for j in 0..n {
            for p in 0..k {
                let want: f64 = (0..m).map(|i| a2[i * n + j] * b2[i * k + p]).sum();
                assert!((c3[j * k + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fast_exp_matches_libm() {
        let mut worst = 0.0f64;
        let mut x = -700.0;
        while x < 700.0 {
            let got = fast_exp(x);
            let want = x.exp();
            let rel = ((got - want) / want).abs();
            worst = worst.max(rel);
            x += 0.37;
        }
        assert!(worst < 5e-15, "worst rel err {worst:e}");
    }

    #[test]
    fn fast_tanh_matches_libm() {
        let mut worst = 0.0f64;
        let mut x = -30.0;
        while x <= 30.0 {
            let err = (fast_tanh(x) - x.tanh()).abs();
            worst = worst.max(err);
            x += 1e-3;
        }
        assert!(worst < 4e-15, "worst abs err {worst:e}");
        assert_eq!(fast_tanh(0.0), 0.0);
        assert_eq!(fast_tanh(25.0), 1.0);
        assert_eq!(fast_tanh(-25.0), -1.0);
    }

    #[test]
    fn softplus_sigmoid_stable_at_extremes() {
        assert!(softplus(800.0).is_finite());
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(40.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-40.0) > 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn row_helpers_match_direct_computation() {
        let x = pseudo(6);
        let s = vec![2.0, -1.0, 0.5];
        let mut scaled = vec![0.0; 6];
        row_scale(&x, &s, &mut scaled, 3, 2);
        assert_eq!(scaled[0], x[0] * 2.0);
        assert_eq!(scaled[5], x[5] * 0.5);

        let mut ri = vec![0.0; 3];
        row_inner(&x, &x, &mut ri, 3, 2);
        assert!((ri[1] - (x[2] * x[2] + x[3] * x[3])).abs() < 1e-15);

        let mut sr = vec![0.0; 2];
        sum_rows(&x, &mut sr, 3, 2);
        assert!((sr[0] - (x[0] + x[2] + x[4])).abs() < 1e-15);
    }
}
