//! Dense `f64` compute primitives used by the tape ops.
//!
//! Every entry point has a portable scalar implementation; on x86-64 an
//! AVX2+FMA path is selected once per process when the CPU supports it.
//! Which path runs never changes mid-process, so repeated runs on the same
//! machine and build produce bit-identical results.

#[cfg(target_arch = "x86_64")]
use std::sync::OnceLock;

#[cfg(target_arch = "x86_64")]
fn simd_enabled() -> bool {
    static ENABLED: OnceLock<bool> = OnceLock::new();
    *ENABLED.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

/// `out[r] = sum_c w[r*cols + c] * x[c]` for a row-major `rows x cols` matrix.
pub fn matvec(out: &mut [f64], w: &[f64], x: &[f64], rows: usize, cols: usize) {
    assert_eq!(w.len(), rows * cols, "matvec: weight length mismatch");
    assert_eq!(x.len(), cols, "matvec: input length mismatch");
    assert_eq!(out.len(), rows, "matvec: output length mismatch");
    #[cfg(target_arch = "x86_64")]
    if simd_enabled() {
        // Safety: AVX2+FMA availability was checked at dispatch.
        unsafe { matvec_avx(out, w, x, rows, cols) };
        return;
    }
    matvec_scalar(out, w, x, rows, cols);
}

/// `y += a * x`, elementwise.
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    assert_eq!(y.len(), x.len(), "axpy: length mismatch");
    #[cfg(target_arch = "x86_64")]
    if simd_enabled() {
        // Safety: AVX2+FMA availability was checked at dispatch.
        unsafe { axpy_avx(y, a, x) };
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    #[cfg(target_arch = "x86_64")]
    if simd_enabled() {
        // Safety: AVX2+FMA availability was checked at dispatch.
        return unsafe { dot_avx(a, b) };
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec_scalar(out: &mut [f64], w: &[f64], x: &[f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn matvec_avx(out: &mut [f64], w: &[f64], x: &[f64], rows: usize, cols: usize) {
    use std::arch::x86_64::*;

    #[inline]
    unsafe fn hsum(v: __m256d) -> f64 {
        let lo = _mm256_castpd256_pd128(v);
        let hi = _mm256_extractf128_pd(v, 1);
        let s = _mm_add_pd(lo, hi);
        let h = _mm_unpackhi_pd(s, s);
        _mm_cvtsd_f64(_mm_add_sd(s, h))
    }

    let xp = x.as_ptr();
    let mut r = 0;
    // Two rows at a time, two 4-lane accumulators per row.
    while r + 2 <= rows {
        let w0 = w.as_ptr().add(r * cols);
        let w1 = w.as_ptr().add((r + 1) * cols);
        let mut a00 = _mm256_setzero_pd();
        let mut a01 = _mm256_setzero_pd();
        let mut a10 = _mm256_setzero_pd();
        let mut a11 = _mm256_setzero_pd();
        let mut c = 0;
        while c + 8 <= cols {
            let x0 = _mm256_loadu_pd(xp.add(c));
            let x1 = _mm256_loadu_pd(xp.add(c + 4));
            a00 = _mm256_fmadd_pd(_mm256_loadu_pd(w0.add(c)), x0, a00);
            a01 = _mm256_fmadd_pd(_mm256_loadu_pd(w0.add(c + 4)), x1, a01);
            a10 = _mm256_fmadd_pd(_mm256_loadu_pd(w1.add(c)), x0, a10);
            a11 = _mm256_fmadd_pd(_mm256_loadu_pd(w1.add(c + 4)), x1, a11);
            c += 8;
        }
        let mut s0 = hsum(_mm256_add_pd(a00, a01));
        let mut s1 = hsum(_mm256_add_pd(a10, a11));
        while c < cols {
            s0 += *w0.add(c) * *xp.add(c);
            s1 += *w1.add(c) * *xp.add(c);
            c += 1;
        }
        out[r] = s0;
        out[r + 1] = s1;
        r += 2;
    }
    if r < rows {
        let w0 = w.as_ptr().add(r * cols);
        let mut a00 = _mm256_setzero_pd();
        let mut a01 = _mm256_setzero_pd();
        let mut c = 0;
        while c + 8 <= cols {
            a00 = _mm256_fmadd_pd(_mm256_loadu_pd(w0.add(c)), _mm256_loadu_pd(xp.add(c)), a00);
            a01 = _mm256_fmadd_pd(
                _mm256_loadu_pd(w0.add(c + 4)),
                _mm256_loadu_pd(xp.add(c + 4)),
                a01,
            );
            c += 8;
        }
        let mut s0 = hsum(_mm256_add_pd(a00, a01));
        while c < cols {
            s0 += *w0.add(c) * *xp.add(c);
            c += 1;
        }
        out[r] = s0;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn axpy_avx(y: &mut [f64], a: f64, x: &[f64]) {
    use std::arch::x86_64::*;
    let av = _mm256_set1_pd(a);
    let n = y.len();
    let yp = y.as_mut_ptr();
    let xp = x.as_ptr();
    let mut i = 0;
    while i + 8 <= n {
        let r0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(xp.add(i)), _mm256_loadu_pd(yp.add(i)));
        let r1 = _mm256_fmadd_pd(
            av,
            _mm256_loadu_pd(xp.add(i + 4)),
            _mm256_loadu_pd(yp.add(i + 4)),
        );
        _mm256_storeu_pd(yp.add(i), r0);
        _mm256_storeu_pd(yp.add(i + 4), r1);
        i += 8;
    }
    while i < n {
        *yp.add(i) += a * *xp.add(i);
        i += 1;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn dot_avx(a: &[f64], b: &[f64]) -> f64 {
    use std::arch::x86_64::*;
    let n = a.len();
    let ap = a.as_ptr();
    let bp = b.as_ptr();
    let mut acc0 = _mm256_setzero_pd();
    let mut acc1 = _mm256_setzero_pd();
    let mut i = 0;
    while i + 8 <= n {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(ap.add(i)), _mm256_loadu_pd(bp.add(i)), acc0);
        acc1 = _mm256_fmadd_pd(
            _mm256_loadu_pd(ap.add(i + 4)),
            _mm256_loadu_pd(bp.add(i + 4)),
            acc1,
        );
        i += 8;
    }
    let s = _mm256_add_pd(acc0, acc1);
    let lo = _mm256_castpd256_pd128(s);
    let hi = _mm256_extractf128_pd(s, 1);
    let s2 = _mm_add_pd(lo, hi);
    let h = _mm_unpackhi_pd(s2, s2);
    let mut total = _mm_cvtsd_f64(_mm_add_sd(s2, h));
    while i < n {
        total += *ap.add(i) * *bp.add(i);
        i += 1;
    }
    total
}
