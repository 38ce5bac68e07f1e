//! Row-major matrix products. Panels of 32 output columns go through a
//! register-blocked kernel compiled for AVX2/FMA when the CPU has it; every
//! other case goes to `matrixmultiply::sgemm`.

use alloc::vec::Vec;

/// `c = a * b` (or `c += a * b` when `accumulate`), where `a` is `m x k` and
/// `b` is `k x n` after the optional transposes. A transposed operand is
/// stored row-major in its untransposed shape (`k x m` for `a`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    if !a_trans && n % PANEL == 0 && m >= 8 && fast::available() {
        let bt;
        let b = if b_trans {
            bt = transpose(n, k, b);
            &bt[..]
        } else {
            b
        };
        if !accumulate {
            c.fill(0.0);
        }
        fast::run(m, k, n, a, b, c);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the m*k, k*n and m*n elements the
    // strides address, as asserted above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const PANEL: usize = 32;

/// Row-major transpose of an `r x c` matrix.
fn transpose(r: usize, c: usize, x: &[f32]) -> Vec<f32> {
    let mut t = alloc::vec![0.0; r * c];
    const B: usize = 16;
    for i0 in (0..r).step_by(B) {
        for j0 in (0..c).step_by(B) {
            for i in i0..(i0 + B).min(r) {
                for j in j0..(j0 + B).min(c) {
                    t[j * r + i] = x[i * c + j];
                }
            }
        }
    }
    t
}

#[cfg(feature = "std")]
#[inline(always)]
fn fma(a: f32, b: f32, c: f32) -> f32 {
    a.mul_add(b, c)
}

#[cfg(not(feature = "std"))]
#[inline(always)]
fn fma(a: f32, b: f32, c: f32) -> f32 {
    libm::fmaf(a, b, c)
}

/// `c += a * b` over 32-column panels, two rows of `a` at a time so the
/// accumulators stay in registers.
#[inline(always)]
fn panel_kernel(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for j0 in (0..n).step_by(PANEL) {
        let mut i = 0;
        while i + 2 <= m {
            let (a0, a1) = (&a[i * k..(i + 1) * k], &a[(i + 1) * k..(i + 2) * k]);
            let mut acc0 = [0.0f32; PANEL];
            let mut acc1 = [0.0f32; PANEL];
            for l in 0..k {
                let br: &[f32; PANEL] = b[l * n + j0..l * n + j0 + PANEL].try_into().unwrap();
                let (x0, x1) = (a0[l], a1[l]);
                for j in 0..PANEL {
                    acc0[j] = fma(x0, br[j], acc0[j]);
                    acc1[j] = fma(x1, br[j], acc1[j]);
                }
            }
            for j in 0..PANEL {
                c[i * n + j0 + j] += acc0[j];
                c[(i + 1) * n + j0 + j] += acc1[j];
            }
            i += 2;
        }
        if i < m {
            let a0 = &a[i * k..(i + 1) * k];
            let mut acc0 = [0.0f32; PANEL];
            for l in 0..k {
                let br: &[f32; PANEL] = b[l * n + j0..l * n + j0 + PANEL].try_into().unwrap();
                for j in 0..PANEL {
                    acc0[j] = fma(a0[l], br[j], acc0[j]);
                }
            }
            for j in 0..PANEL {
                c[i * n + j0 + j] += acc0[j];
            }
        }
    }
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
mod fast {
    use std::sync::OnceLock;

    pub(super) fn available() -> bool {
        static HAS: OnceLock<bool> = OnceLock::new();
        *HAS.get_or_init(|| std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma"))
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn run_avx2(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        super::panel_kernel(m, k, n, a, b, c)
    }

    pub(super) fn run(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        // SAFETY: only reached when `available()` confirmed AVX2 and FMA.
        unsafe { run_avx2(m, k, n, a, b, c) }
    }
}

#[cfg(not(all(feature = "std", target_arch = "x86_64")))]
mod fast {
    pub(super) fn available() -> bool {
        false
    }

    pub(super) fn run(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        super::panel_kernel(m, k, n, a, b, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> alloc::vec::Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f32]) -> alloc::vec::Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn matches_naive_with_transposes() {
        for (m, k, n) in [(5, 7, 3), (9, 13, 64), (17, 40, 32)] {
            check(m, k, n);
        }
    }

    fn check(m: usize, k: usize, n: usize) {
        let a: alloc::vec::Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: alloc::vec::Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { transpose(m, k, &a) } else { a.clone() };
            let bb = if tb { transpose(k, n, &b) } else { b.clone() };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &aa, ta, &bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-4);
            }
            gemm(m, k, n, &aa, ta, &bb, tb, &mut c, true);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - 2.0 * y).abs() < 2e-4);
            }
        }
    }
}
